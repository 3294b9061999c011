"""Binary checkpoints, calibration files, CSV export and plan files.

Checkpoint layout::

    b"FFNF" | u32 version=1 | u64 config_len | config JSON (UTF-8) | tensors

Tensors follow in block order; per block: norm1, Wq, Wk, Wv, Wo (with
attention) then norm2, W1, W2, W3 (with an FFN). Each is row-major,
little-endian, in the header's dtype.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CorruptCalibrationError, CorruptCheckpointError, InvalidArgumentError, InvalidPlanError
from .fusion import FusionPlan
from .model import (
    DTYPES,
    AttentionWeights,
    Block,
    BlockSpec,
    FfnWeights,
    Model,
    ModelConfig,
    NormScale,
    validate_stages,
)
from .parallel import ParallelPlan
from .rng import SplitMix64

MAGIC = b"FFNF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_RECORD = struct.Struct("<II")

PathLike = Union[str, os.PathLike]


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _block_tensors(b: Block):
    if b.attn is not None:
        yield b.norm1.s
        yield from (b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo)
    if b.ffn is not None:
        yield b.norm2.s
        yield from (b.ffn.w1, b.ffn.w2, b.ffn.w3)


def config_document(config: ModelConfig, stages=None) -> dict:
    doc = {
        "version": VERSION,
        "d_e": config.d_e,
        "n_heads": config.n_heads,
        "head_dim": config.head_dim,
        "dtype": config.dtype,
        "blocks": [
            {"attention": s.has_attention, "ffn_hidden": s.ffn_hidden} for s in config.block_specs
        ],
    }
    if stages is not None:
        doc["stages"] = [list(s) for s in stages]
    return doc


def config_from_document(doc: dict, dtype: Optional[str] = None) -> ModelConfig:
    """Parse the JSON config shared by checkpoint headers and ``gen --config`` files."""
    try:
        specs = tuple(
            BlockSpec(bool(b["attention"]), int(b["ffn_hidden"])) for b in doc["blocks"]
        )
        return ModelConfig(
            d_e=int(doc["d_e"]),
            n_heads=int(doc["n_heads"]),
            head_dim=int(doc["head_dim"]),
            block_specs=specs,
            dtype=dtype or doc.get("dtype", "f64"),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed model config: {exc!r}") from exc


def serialize_model(model: Model, dtype: Optional[str] = None) -> bytes:
    """Checkpoint bytes. ``dtype`` converts explicitly; by default the model's own dtype is kept."""
    tag = dtype or model.config.dtype
    if tag not in DTYPES:
        raise InvalidArgumentError(f"dtype must be one of {sorted(DTYPES)}")
    doc = config_document(model.config, model.stages)
    doc["dtype"] = tag
    header = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    le = _le(DTYPES[tag])
    for b in model.blocks:
        for t in _block_tensors(b):
            out.append(np.ascontiguousarray(t, dtype=le).tobytes())
    return b"".join(out)


def deserialize_model(data: bytes) -> Model:
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError("file too short for a checkpoint header")
    magic, version, config_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if config_len > len(data) - start:
        raise CorruptCheckpointError("config length exceeds file size")
    try:
        doc = json.loads(data[start : start + config_len].decode("utf-8"))
        if doc.get("version") != VERSION:
            raise CorruptCheckpointError("config version mismatch")
        config = config_from_document(doc)
        stages = doc.get("stages") or None
        if stages is not None:
            validate_stages(stages, config.m)
    except (UnicodeDecodeError, json.JSONDecodeError, InvalidArgumentError, AttributeError) as exc:
        raise CorruptCheckpointError(f"unreadable config: {exc}") from exc

    d_e, width = config.d_e, config.n_heads * config.head_dim
    shapes = []
    for spec in config.block_specs:
        if spec.has_attention:
            shapes += [(d_e,), (width, d_e), (width, d_e), (width, d_e), (d_e, width)]
        if spec.ffn_hidden:
            h = spec.ffn_hidden
            shapes += [(d_e,), (h, d_e), (h, d_e), (d_e, h)]
    le = _le(config.np_dtype)
    expected = sum(int(np.prod(s)) for s in shapes) * le.itemsize
    offset = start + config_len
    if expected != len(data) - offset:
        raise CorruptCheckpointError(
            f"tensor region is {len(data) - offset} bytes, header declares {expected}"
        )

    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=le, count=count, offset=offset).reshape(shape)
        tensors.append(arr.astype(config.np_dtype))
        offset += count * le.itemsize

    it = iter(tensors)
    blocks = []
    for spec in config.block_specs:
        b = Block()
        if spec.has_attention:
            b.norm1 = NormScale(next(it))
            b.attn = AttentionWeights(next(it), next(it), next(it), next(it), config.n_heads, config.head_dim)
        if spec.ffn_hidden:
            b.norm2 = NormScale(next(it))
            b.ffn = FfnWeights(next(it), next(it), next(it))
        blocks.append(b)
    return Model(config, blocks, stages)


def save_model(model: Model, path: PathLike, dtype: Optional[str] = None) -> None:
    Path(path).write_bytes(serialize_model(model, dtype))


def load_model(path: PathLike) -> Model:
    return deserialize_model(Path(path).read_bytes())


# calibration sets: a sequence of [u32 n][u32 d_e][n*d_e f64] records


def generate_calibration(seed: int, count: int, n: int, d_e: int) -> list[np.ndarray]:
    if count < 1 or n < 1 or d_e < 1:
        raise InvalidArgumentError("count, n and d_e must all be >= 1")
    rng = SplitMix64(seed)
    return [rng.uniform((n, d_e)) * 2.0 - 1.0 for _ in range(count)]


def save_calibration(samples, path: PathLike) -> None:
    parts = []
    for X in samples:
        X = np.asarray(X, dtype="<f8")
        if X.ndim != 2:
            raise InvalidArgumentError("calibration samples must be 2-D")
        parts.append(_RECORD.pack(*X.shape))
        parts.append(np.ascontiguousarray(X).tobytes())
    Path(path).write_bytes(b"".join(parts))


def parse_calibration(data: bytes) -> list[np.ndarray]:
    samples = []
    offset = 0
    d_e0 = None
    while offset < len(data):
        if len(data) - offset < _RECORD.size:
            raise CorruptCalibrationError(f"truncated record header at byte {offset}")
        n, d_e = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        if n < 1 or d_e < 1:
            raise CorruptCalibrationError(f"record at byte {offset} has an empty shape")
        if d_e0 is None:
            d_e0 = d_e
        elif d_e != d_e0:
            raise CorruptCalibrationError(f"record d_e={d_e} differs from the first record's {d_e0}")
        nbytes = n * d_e * 8
        if len(data) - offset < nbytes:
            raise CorruptCalibrationError("truncated record payload")
        samples.append(np.frombuffer(data, dtype="<f8", count=n * d_e, offset=offset).reshape(n, d_e).astype(np.float64))
        offset += nbytes
    if not samples:
        raise CorruptCalibrationError("calibration file holds no records")
    return samples


def load_calibration(path: PathLike) -> list[np.ndarray]:
    return parse_calibration(Path(path).read_bytes())


# CSV: no header, LF line ends, 17 significant digits


def format_csv(values) -> str:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidArgumentError("CSV export takes a vector or a matrix")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("CSV export requires finite values")
    return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in arr)


def export_csv(values, path: PathLike) -> None:
    text = format_csv(values)
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc.strerror}") from exc


def read_csv(path: PathLike) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    if not rows or len({len(r) for r in rows}) != 1:
        raise InvalidArgumentError(f"{path}: CSV is empty or not rectangular")
    return np.array(rows, dtype=np.float64)


# plan files: one header line of key=value pairs, then "i j" per range


def parse_plan(text: str):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidPlanError("plan file is empty")
    try:
        header = dict(tok.split("=", 1) for tok in lines[0].split())
        ranges = []
        for ln in lines[1:]:
            a, b = ln.split()
            ranges.append((int(a), int(b)))
    except ValueError as exc:
        raise InvalidPlanError(f"malformed plan: {exc}") from exc
    if header.get("kind") == "parallel":
        try:
            w = int(header["w"])
        except (KeyError, ValueError) as exc:
            raise InvalidPlanError("parallel plan header needs w=<int>") from exc
        return ParallelPlan(ranges, w)
    if set(header) != {"exclude_last", "scale_mode"} or header["exclude_last"] not in ("0", "1"):
        raise InvalidPlanError(f"unrecognised plan header {lines[0]!r}")
    return FusionPlan(ranges, exclude_last=header["exclude_last"] == "1", scale_mode=header["scale_mode"])


def load_plan(path: PathLike):
    return parse_plan(Path(path).read_text())


def save_plan(plan, path: PathLike) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(plan.to_text())
