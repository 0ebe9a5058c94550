import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camnet import evaluation as ev
from camnet.dataset import write_dataset
from camnet.errors import MissingDataError, ParseError
from camnet.networks import CAMNet
from camnet.synth import make_dataset


def test_zero_flow_is_identity_transfer():
    pts = np.array([[0.0, 0.0], [31.5, 12.25], [63.0, 63.0]])
    out = ev.transfer_keypoints(np.zeros((2, 16, 16)), pts, (64, 64))
    np.testing.assert_allclose(out, pts, atol=1e-9)


def test_constant_flow_shifts_by_one_pixel():
    flow = np.zeros((2, 16, 16))
    flow[0] = 2.0 / 64  # one pixel in normalized units
    pts = np.array([[10.0, 20.0], [40.3, 5.7]])
    out = ev.transfer_keypoints(flow, pts, (64, 64))
    np.testing.assert_allclose(out, pts + [1.0, 0.0], atol=1e-4)


def test_ground_truth_flow_transfers_keypoints():
    for s in make_dataset(8, seed=3):
        moved = ev.transfer_keypoints(s.flow_st, s.keypoints[:, 2:], s.size)
        err = np.linalg.norm(moved - s.keypoints[:, :2], axis=1)
        assert err.max() < 0.5


def test_pck_examples():
    gt = np.zeros((4, 2))
    pred = np.array([[0, 0], [6.4, 0], [0, 6.41], [3, 4]])
    r = ev.pck(pred, gt, 0.1, "image", (64, 64))
    assert (r.correct, r.total, r.pck) == ([3], [4], 0.75)
    r = ev.pck(pred, gt, 0.1, "bbox", bbox=(0, 0, 50, 20))
    assert r.correct == [2]  # threshold 5 px; the 3-4-5 point sits on it
    with pytest.raises(MissingDataError):
        ev.pck(pred, gt, 0.1, "bbox")
    with pytest.raises(ValueError):
        ev.pck(pred, gt[:2], 0.1, "image", (64, 64))
    with pytest.raises(ValueError):
        ev.pck(pred, gt, 0.0, "image", (64, 64))
    with pytest.raises(ValueError):
        ev.pck(pred, gt, 0.1, "diagonal", (64, 64))


def _loop_pck(pred, gt, alpha, ref):
    hits = 0
    for (px, py), (gx, gy) in zip(pred, gt):
        if ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5 <= alpha * ref:
            hits += 1
    return hits / len(gt)


points = st.lists(st.tuples(st.floats(0, 63), st.floats(0, 63), st.floats(0, 63), st.floats(0, 63)),
                  min_size=1, max_size=30)


@given(points, st.floats(0.01, 0.5))
def test_pck_matches_loop_oracle(rows, alpha):
    arr = np.array(rows)
    assert ev.pck(arr[:, :2], arr[:, 2:], alpha, "image", (64, 64)).pck == _loop_pck(arr[:, :2], arr[:, 2:], alpha, 64)


@given(points, st.floats(0.01, 0.4), st.floats(0.0, 0.3), st.randoms())
def test_pck_monotone_and_permutation_invariant(rows, alpha, extra, rnd):
    arr = np.array(rows)
    lo = ev.pck(arr[:, :2], arr[:, 2:], alpha, "image", (64, 64)).pck
    hi = ev.pck(arr[:, :2], arr[:, 2:], alpha + extra, "image", (64, 64)).pck
    assert lo <= hi
    order = list(range(len(arr)))
    rnd.shuffle(order)
    assert ev.pck(arr[order, :2], arr[order, 2:], alpha, "image", (64, 64)).pck == lo


def test_pf_pairs_round_trip(tmp_path):
    write_dataset(make_dataset(3, seed=0), tmp_path)
    records = ev.load_pf_pairs(tmp_path / "pairs.csv")
    assert len(records) == 3
    assert all(r.keypoints.points.shape[1] == 4 for r in records)
    ev.write_pf_pairs(tmp_path / "again.csv", records)
    again = ev.load_pf_pairs(tmp_path / "again.csv")
    for a, b in zip(records, again):
        assert (a.src, a.tgt) == (b.src, b.tgt)
        np.testing.assert_array_equal(a.keypoints.points, b.keypoints.points)
        assert a.keypoints.bbox == b.keypoints.bbox


def test_pf_pairs_parse_errors(tmp_path):
    path = tmp_path / "pairs.csv"
    path.write_text("src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h\na.ppm,b.ppm,k.csv\n")
    with pytest.raises(ParseError, match="line 2"):
        ev.load_pf_pairs(path)
    (tmp_path / "k.csv").write_text("x_src,y_src,x_tgt,y_tgt\n1,1,1,1\n")
    path.write_text("src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h\na.ppm,b.ppm,k.csv,1,2,,\n")
    with pytest.raises(ParseError, match="partial bbox"):
        ev.load_pf_pairs(path)


def test_keypoints_outside_frame_rejected(tmp_path):
    write_dataset(make_dataset(1, seed=0), tmp_path)
    rec = ev.load_pf_pairs(tmp_path / "pairs.csv")[0]
    rec.keypoints.points[0, 0] = 80.0
    ev.write_pf_pairs(tmp_path / "bad.csv", [rec])
    with pytest.raises(ParseError, match="outside"):
        ev.load_pf_pairs(tmp_path / "bad.csv")


def _oracle_predictions(samples):
    def predict(model, sources, targets, batch_size=16):
        flows = np.stack([s.flow_st for s in samples]).astype(np.float32)
        conf = np.ones((len(samples), 1) + flows.shape[-2:], np.float32)
        return {"flow_base": flows, "flow_refined": flows, "flow_updated": flows,
                "conf_base": conf, "conf_refined": conf}
    return predict


def test_ground_truth_predictions_score_one(monkeypatch):
    samples = make_dataset(4, seed=1)
    monkeypatch.setattr(ev, "predict_flows", _oracle_predictions(samples))
    report = ev.evaluate_samples(None, samples, alphas=(0.05, 0.1))
    assert all(r.pck == 1.0 for r in report.results)
    assert report.confidence["refined"][0] == 1.0


def test_dataset_evaluation_skips_unreadable_and_is_deterministic(tmp_path):
    samples = make_dataset(3, seed=4)
    write_dataset(samples, tmp_path)
    model = CAMNet(64, seed=0)
    first = ev.evaluate_dataset(model, tmp_path)
    second = ev.evaluate_dataset(model, tmp_path)
    assert first.table() == second.table()
    assert first.skipped == 0
    direct = ev.evaluate_samples(model, samples)
    assert direct.table() == first.table()

    broken = sorted(tmp_path.glob("*_src.ppm"))[0]
    broken.write_bytes(b"P6\n64 64\n255\n")
    report = ev.evaluate_dataset(model, tmp_path)
    assert report.skipped == 1
    assert len(report.get(0.1).total) == 2


def test_results_csv():
    r = ev.PckResult(0.1, "image", [3, 4], [4, 4], "base")
    buf = io.StringIO()
    ev.write_results(buf, [r])
    assert buf.getvalue().splitlines() == ["alpha,reference,level,correct,total,pck", "0.1,image,base,7,8,0.875"]
