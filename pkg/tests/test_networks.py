import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camnet.engine import Tape, Tensor, no_grad
from camnet.engine import autodiff as A
from camnet.engine import functional as F
from camnet.engine.optim import Adam
from camnet.errors import ShapeError
from camnet.gradcheck import check_gradients
from camnet.networks import (CAMNet, ConfidenceNet, FeatureExtractor, RefineNet, correlation,
                             forward_pass, fuse_flows, kernel_soft_argmax, transpose_correlation, warp)
from camnet.synth import label_confidence


def soft_argmax_oracle(corr, hs, ws, temperature, sigma):
    """Direct per-cell summation of the kernel soft argmax."""
    q, ht, wt = corr.shape
    flow = np.zeros((2, ht, wt))
    cx = (2 * np.arange(ws) + 1) / ws - 1
    cy = (2 * np.arange(hs) + 1) / hs - 1
    tx = (2 * np.arange(wt) + 1) / wt - 1
    ty = (2 * np.arange(ht) + 1) / ht - 1
    for py in range(ht):
        for px in range(wt):
            col = corr[:, py, px]
            best = int(np.argmax(col))
            by, bx = divmod(best, ws)
            scores = []
            for qi in range(q):
                qy, qx = divmod(qi, ws)
                k = np.exp(-((qx - bx) ** 2 + (qy - by) ** 2) / (2 * sigma ** 2))
                scores.append(k * col[qi] / temperature)
            scores = np.array(scores)
            wts = np.exp(scores - scores.max())
            wts /= wts.sum()
            sx = sum(wts[qi] * cx[qi % ws] for qi in range(q))
            sy = sum(wts[qi] * cy[qi // ws] for qi in range(q))
            flow[:, py, px] = sx - tx[px], sy - ty[py]
    return flow


def orthonormal_features(d, h, w):
    eye = np.eye(d)[: h * w]
    return eye.T.reshape(d, h, w)


@pytest.fixture(scope="module")
def small_model():
    model = CAMNet(image_size=32, seed=3)
    model.eval()
    return model


def test_extractor_shape_and_unit_norm(rng):
    ext = FeatureExtractor(16, rng=rng)
    ext.eval()
    f = ext(Tensor(rng.uniform(size=(3, 64, 64)).astype(np.float32)))
    assert f.shape == (16, 16, 16)
    np.testing.assert_allclose(np.linalg.norm(f.data, axis=0), 1, atol=1e-6)
    with pytest.raises(ShapeError):
        ext(Tensor(np.zeros((3, 30, 32), dtype=np.float32)))


def test_extractor_is_deterministic_and_translation_equivariant(rng):
    ext = FeatureExtractor(16, rng=rng)
    ext.eval()
    img = rng.uniform(size=(3, 64, 64))
    shifted = np.zeros_like(img)
    shifted[:, :, 4:] = img[:, :, :-4]
    a = ext(Tensor(img)).data
    np.testing.assert_array_equal(a, ext(Tensor(img.copy())).data)
    b = ext(Tensor(shifted)).data
    # one feature column per 4 pixels; compare away from both borders
    np.testing.assert_allclose(b[:, 2:-2, 3:-2], a[:, 2:-2, 2:-3], atol=1e-4)


def test_correlation_orthonormal_identity():
    f = orthonormal_features(16, 4, 4)
    s = correlation(Tensor(f), Tensor(f)).data
    np.testing.assert_allclose(s.reshape(16, 16), np.eye(16), atol=1e-12)


def test_correlation_loop_oracle(rng):
    fs = rng.standard_normal((4, 3, 3))
    ft = rng.standard_normal((4, 3, 3))
    fs /= np.linalg.norm(fs, axis=0)
    ft /= np.linalg.norm(ft, axis=0)
    s = correlation(Tensor(fs), Tensor(ft)).data
    for qy in range(3):
        for qx in range(3):
            for py in range(3):
                for px in range(3):
                    assert s[qy * 3 + qx, py, px] == pytest.approx(fs[:, qy, qx] @ ft[:, py, px], abs=1e-6)


def test_correlation_antipodal_and_errors(rng):
    fs = rng.standard_normal((3, 2, 2))
    fs /= np.linalg.norm(fs, axis=0)
    s = correlation(Tensor(fs), Tensor(-fs)).data
    assert s[0, 0, 0] == pytest.approx(-1)
    with pytest.raises(ShapeError):
        correlation(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((4, 2, 2))))


def test_transpose_correlation_swaps_roles(rng):
    fs, ft = rng.standard_normal((2, 3, 2, 4)), rng.standard_normal((2, 3, 3, 2))
    s_st = correlation(Tensor(fs), Tensor(ft))
    s_ts = correlation(Tensor(ft), Tensor(fs))
    np.testing.assert_allclose(transpose_correlation(s_st, (2, 4), (3, 2)).data, s_ts.data)


def test_soft_argmax_one_hot_limit(rng):
    corr = -np.ones((9, 1, 1))
    corr[5] = 1
    flow = kernel_soft_argmax(Tensor(corr), (3, 3), temperature=1e-4).data
    # target cell center is 0; source cell 5 is (x=2, y=1) -> (2/3, 0)
    np.testing.assert_allclose(flow[:, 0, 0], [2 / 3, 0], atol=1e-3)


def test_soft_argmax_self_matching():
    f = orthonormal_features(16, 4, 4)
    s = correlation(Tensor(f), Tensor(f))
    flow = kernel_soft_argmax(s, (4, 4), temperature=0.05).data
    np.testing.assert_allclose(flow, 0, atol=1e-6)


@given(st.integers(0, 2 ** 31))
def test_soft_argmax_direct_summation_oracle(seed):
    corr = np.random.default_rng(seed).uniform(-1, 1, size=(9, 3, 3))
    flow = kernel_soft_argmax(Tensor(corr), (3, 3), 0.05, 1.0).data
    np.testing.assert_allclose(flow, soft_argmax_oracle(corr, 3, 3, 0.05, 1.0), atol=1e-6)


def test_soft_argmax_lowest_index_wins_ties():
    corr = np.zeros((4, 1, 1))
    corr[1] = corr[3] = 1.0
    flow = kernel_soft_argmax(Tensor(corr), (2, 2), temperature=1e-4).data
    np.testing.assert_allclose(flow[:, 0, 0], [0.5, -0.5], atol=1e-3)


def test_confidence_contract(rng):
    net = ConfidenceNet(16, 32, rng=rng)
    f = rng.standard_normal((2, 16, 16, 16)).astype(np.float32)
    flow = rng.standard_normal((2, 2, 16, 16)).astype(np.float32)
    p = net.probabilities(Tensor(f), Tensor(flow)).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    c = net(Tensor(f[0]), Tensor(flow[0])).data
    assert c.shape == (1, 16, 16)
    assert np.all((c > 0) & (c < 1))
    with pytest.raises(ShapeError):
        net(Tensor(f[0]), Tensor(flow[0, :, :8]))


def test_confidence_overfits_one_labelled_sample(rng):
    net = ConfidenceNet(4, 32, rng=rng)
    f = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    gt = np.zeros((1, 2, 8, 8), dtype=np.float32)
    flow = (gt + rng.normal(0, 0.2, size=gt.shape)).astype(np.float32)
    labels = label_confidence(flow, gt, 0.2)
    assert 0 < labels.mean() < 1
    opt = Adam(net.named_parameters(), lr=1e-2)
    for _ in range(300):
        with Tape() as tape:
            c = net(Tensor(f), Tensor(flow))
            eps = 1e-7
            cc = A.clip(c, eps, 1 - eps)
            bce = A.neg(A.mean(A.add(A.mul(A.log(cc), Tensor(labels)),
                                     A.mul(A.log(A.sub(1.0, cc)), Tensor(1 - labels)))))
            opt.zero_grad()
            tape.backward(bce)
        opt.step()
    with no_grad():
        c = net(Tensor(f), Tensor(flow)).data
    assert c[labels == 1].mean() > 0.9
    assert c[labels == 0].mean() < 0.1


def test_refine_shapes_gate_and_gradient(rng):
    net = RefineNet(256, rng=rng)
    corr = rng.standard_normal((1, 256, 16, 16)).astype(np.float32)
    conf = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
    assert net(Tensor(conf), Tensor(corr)).shape == (1, 2, 16, 16)
    gated = net.gate(Tensor(np.zeros_like(conf)), Tensor(corr)).data
    np.testing.assert_array_equal(gated, 0)
    with pytest.raises(ShapeError):
        net(Tensor(conf[..., :8]), Tensor(corr))

    small = RefineNet(4, growth=2, layers=2, bottleneck=3, rng=rng)
    small.eval()
    c = rng.uniform(0.2, 0.8, size=(1, 1, 3, 3))
    s = rng.standard_normal((1, 4, 3, 3))
    for p in small.parameters():
        p.data = p.data.astype(np.float64)
    fn = lambda corr: A.sum_(small(Tensor(c), corr))  # noqa: E731
    _, _, ok = check_gradients(fn, [s])
    assert ok


def test_fuse_flow_identities(rng):
    fb = rng.standard_normal((2, 4, 4)).astype(np.float32)
    fu = rng.standard_normal((2, 4, 4)).astype(np.float32)
    ones = np.ones((1, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(fuse_flows(Tensor(fb), Tensor(fu), Tensor(ones)).data, fb)
    np.testing.assert_array_equal(fuse_flows(Tensor(fb), Tensor(fu), Tensor(0 * ones)).data, fu)
    mixed = fuse_flows(Tensor(np.array([[[0.8]], [[0.0]]])), Tensor(np.array([[[0.0]], [[0.4]]])),
                       Tensor(np.array([[[0.25]]]))).data
    np.testing.assert_allclose(mixed[:, 0, 0], [0.2, 0.3], atol=1e-6)
    with pytest.raises(ShapeError):
        fuse_flows(Tensor(fb), Tensor(fu[:, :2]), Tensor(ones))


def test_warp_zero_flow_and_integer_shift(rng):
    img = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    zero = np.zeros((2, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(warp(Tensor(img), Tensor(zero)).data, img)
    shift = zero.copy()
    shift[0] = 2 / 16
    out = warp(Tensor(img), Tensor(shift)).data
    np.testing.assert_allclose(out[:, :, :-1], img[:, :, 1:], atol=1e-6)
    np.testing.assert_array_equal(out[:, :, -1], 0)


def test_discriminator_patch_map(rng):
    model = CAMNet(image_size=64, seed=0)
    a = Tensor(rng.uniform(size=(2, 3, 64, 64)).astype(np.float32))
    out = model.discriminator(a, a).data
    assert out.shape == (2, 1, 8, 8)
    assert np.all((out > 0) & (out < 1))
    with pytest.raises(ShapeError):
        model.discriminator(a, Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))


def test_forward_pass_bundle(small_model, rng):
    src = Tensor(rng.uniform(size=(2, 3, 32, 32)).astype(np.float32))
    tgt = Tensor(rng.uniform(size=(2, 3, 32, 32)).astype(np.float32))
    with no_grad():
        out = forward_pass(src, tgt, small_model)
    fields_ = out.as_dict()
    assert len(fields_) == 10
    for d in (out.st, out.ts):
        assert d.flow_base.shape == d.flow_updated.shape == d.flow_refined.shape == (2, 2, 8, 8)
        assert d.conf_base.shape == d.conf_refined.shape == (2, 1, 8, 8)
        fused = d.flow_base.data * d.conf_base.data + d.flow_updated.data * (1 - d.conf_base.data)
        np.testing.assert_array_equal(d.flow_refined.data, fused)


def test_forward_pass_directions_match_single_direction_runs(small_model, rng):
    src = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    tgt = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    with no_grad():
        ab = forward_pass(Tensor(src), Tensor(tgt), small_model)
        ba = forward_pass(Tensor(tgt), Tensor(src), small_model)
    np.testing.assert_allclose(ab.st.flow_refined.data, ba.ts.flow_refined.data, atol=1e-6)
    np.testing.assert_allclose(ab.ts.conf_base.data, ba.st.conf_base.data, atol=1e-6)


def test_confidence_input_is_detached(rng):
    model = CAMNet(image_size=32, seed=0)
    img = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    with Tape() as tape:
        out = forward_pass(Tensor(img), Tensor(img[:, :, ::-1].copy()), model)
        tape.backward(A.sum_(out.st.conf_base))
    assert all(p.grad is None for p in model.extractor.parameters())
    assert any(p.grad is not None for p in model.confidence.parameters())
