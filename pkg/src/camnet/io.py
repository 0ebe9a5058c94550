"""File codecs: binary PPM/PGM, flow files, checkpoints, configs and CSV tables."""

from __future__ import annotations

import csv
import io
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptionError, FormatError, ParseError, UnsupportedFormat

FLOW_MAGIC = b"CAFL"
CKPT_MAGIC = b"CAMN"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# PPM / PGM


def _pnm_header(buf: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptionError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_pnm(path) -> np.ndarray:
    """Read a binary P6 (-> 3 x H x W) or P5 (-> 1 x H x W) file into [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic in (b"P3", b"P2", b"P1", b"P4"):
        raise UnsupportedFormat(f"{path}: only binary P5/P6 are supported, got {magic.decode()}")
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a PPM/PGM file")
    tokens, offset = _pnm_header(buf)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: maxval {maxval} (only 255 supported)")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    raster = buf[offset:offset + expected]
    if len(raster) != expected:
        raise CorruptionError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)


def pnm_size(path):
    """(height, width) from a PNM header without decoding the raster."""
    with open(path, "rb") as fh:
        head = fh.read(256)
    tokens, _ = _pnm_header(head)
    return int(tokens[2]), int(tokens[1])


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_pnm(path, img: np.ndarray):
    """Write ``3 x H x W`` as P6 or ``1 x H x W`` / ``H x W`` as P5."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot store {c} channels in PPM/PGM")
    magic = b"P6" if c == 3 else b"P5"
    raster = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raster)


# ---------------------------------------------------------------------------
# flow files


def write_flow(path, flow: np.ndarray):
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be 2 x h x w, got {flow.shape}")
    _, h, w = flow.shape
    payload = flow.transpose(1, 2, 0).astype("<f4").tobytes()
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<II", h, w) + payload)


def read_flow(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CorruptionError(f"{path}: truncated flow header")
    h, w = struct.unpack("<II", buf[4:12])
    expected = h * w * 2 * 4
    actual = len(buf) - 12
    if actual != expected:
        raise CorruptionError(f"{path}: expected {expected} payload bytes, found {actual}")
    data = np.frombuffer(buf[12:], dtype="<f4").reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")

    def take(pos, n):
        if pos + n > len(buf):
            raise CorruptionError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        return buf[pos:pos + n], pos + n

    head, pos = take(4, 8)
    version, count = struct.unpack("<II", head)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        raw, pos = take(pos, 2)
        raw, pos = take(pos, struct.unpack("<H", raw)[0])
        name = raw.decode("utf-8")
        raw, pos = take(pos, 1)
        rank = raw[0]
        raw, pos = take(pos, 4 * rank)
        dims = struct.unpack(f"<{rank}I", raw)
        raw, pos = take(pos, 4 * int(np.prod(dims, dtype=np.int64)))
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CorruptionError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return tensors


def save_tensors(path, tensors):
    tmp = f"{path}.tmp"
    Path(tmp).write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")


# ---------------------------------------------------------------------------
# config and CSV


def parse_config(text: str) -> "OrderedDict[str, str]":
    """``key = value`` lines; ``#`` starts a comment."""
    out = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        out[key] = value
    return out


def format_config(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def write_csv(path_or_file, header, rows):
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if own:
            fh.close()


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
