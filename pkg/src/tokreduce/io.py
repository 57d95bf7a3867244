"""Token dump files (TOKD1) and canonical JSON for records and depth maps.

TOKD1 layout (all little-endian)::

    b"TOKD1" | P:u32 | D:u32 | H:u32 | W:u32 | (P+1)*D float32, CLS row first

Plain feature matrices (query banks, predictor weights, CLS probes) reuse the
format with ``H = W = 0``; the payload is then read as one ``(P+1, D)``
matrix whose first row is an ordinary data row, so an ``n``-row matrix is
stored with ``P = n - 1``.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .types import (DepthMap, ReductionRecord, StageRecord, TokenSet,
                     make_schedule)

MAGIC = b"TOKD1"
_HEADER = struct.Struct("<5sIIII")
SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed dump or JSON files."""


def _pack(rows, P, D, H, W):
    payload = np.ascontiguousarray(rows, dtype="<f4")
    return _HEADER.pack(MAGIC, P, D, H, W) + payload.tobytes()


def _unpack(data):
    if len(data) < _HEADER.size:
        raise FormatError("file too short for a TOKD1 header")
    magic, P, D, H, W = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + (P + 1) * D * 4
    if len(data) != expected:
        raise FormatError(f"payload size {len(data)} != expected {expected}")
    rows = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(P + 1, D)
    return rows.astype(np.float64), (P, D, H, W)


def tokens_to_bytes(tokens):
    if tokens.grid is None:
        raise ValueError("only grid token sets can be dumped with a layout")
    H, W = tokens.grid
    rows = np.vstack([tokens.cls[None, :], tokens.spatial])
    return _pack(rows, tokens.n_tokens, tokens.dim, H, W)


def tokens_from_bytes(data):
    rows, (P, D, H, W) = _unpack(data)
    if H * W != P:
        raise FormatError(f"dump is not a token grid (H={H}, W={W}, P={P})")
    return TokenSet(rows[1:], rows[0], (H, W))


def write_tokens(path, tokens):
    Path(path).write_bytes(tokens_to_bytes(tokens))


def read_tokens(path):
    return tokens_from_bytes(Path(path).read_bytes())


def matrix_to_bytes(matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    n, d = matrix.shape
    if n < 1 or d < 1:
        raise ValueError("matrix must be non-empty")
    return _pack(matrix, n - 1, d, 0, 0)


def matrix_from_bytes(data):
    rows, (_, _, H, W) = _unpack(data)
    if H or W:
        raise FormatError("dump carries a grid layout; use read_tokens")
    return rows


def write_matrix(path, matrix):
    Path(path).write_bytes(matrix_to_bytes(matrix))


def read_matrix(path):
    return matrix_from_bytes(Path(path).read_bytes())


# -- JSON ---------------------------------------------------------------------

def canonical_json(obj):
    """Sorted-key, compact JSON; floats use their shortest round-trip repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def stage_to_dict(stage):
    return {
        "kind": stage.kind,
        "kept": list(stage.kept),
        "labels": None if stage.labels is None else list(stage.labels),
        "weights": None if stage.weights is None else stage.weights.tolist(),
    }


def stage_from_dict(d):
    weights = d.get("weights")
    return StageRecord(
        kind=d["kind"],
        kept=d["kept"],
        labels=d.get("labels"),
        weights=None if weights is None else np.array(weights, dtype=np.float64),
    )


def record_to_dict(record):
    return {
        "schema": SCHEMA_VERSION,
        "type": "ReductionRecord",
        "n_tokens": record.n_tokens,
        "grid": None if record.grid is None else list(record.grid),
        "stage_blocks": list(record.stage_blocks),
        "total_blocks": record.total_blocks,
        "method": record.method,
        "sample_id": record.sample_id,
        "stages": [stage_to_dict(s) for s in record.stages],
    }


def record_from_dict(d):
    if d.get("type") != "ReductionRecord":
        raise FormatError("not a ReductionRecord document")
    return ReductionRecord(
        n_tokens=d["n_tokens"],
        stages=[stage_from_dict(s) for s in d["stages"]],
        grid=None if d["grid"] is None else tuple(d["grid"]),
        stage_blocks=tuple(d["stage_blocks"]),
        total_blocks=d["total_blocks"],
        method=d.get("method", ""),
        sample_id=d.get("sample_id", ""),
    )


def depth_map_to_dict(dm):
    return {
        "schema": SCHEMA_VERSION,
        "type": "DepthMap",
        "grid": list(dm.grid),
        "mean_depth": dm.mean_depth.tolist(),
        "total_blocks": dm.total_blocks,
        "n_records": dm.n_records,
    }


def depth_map_from_dict(d):
    if d.get("type") != "DepthMap":
        raise FormatError("not a DepthMap document")
    return DepthMap(tuple(d["grid"]), np.array(d["mean_depth"], dtype=np.float64),
                    d["total_blocks"], d["n_records"])


def schedule_to_dict(schedule):
    return {
        "type": "KeepSchedule",
        "keep_rate": schedule.keep_rate,
        "n_tokens": schedule.n_tokens,
        "stage_blocks": list(schedule.stage_blocks),
        "total_blocks": schedule.total_blocks,
        "budgets": list(schedule.budgets),
    }


def schedule_from_dict(d):
    s = make_schedule(d["n_tokens"], d["keep_rate"], d["stage_blocks"], d["total_blocks"])
    if list(s.budgets) != list(d["budgets"]):
        raise FormatError("stored budgets disagree with the keep rate")
    return s


def dumps_record(record):
    return canonical_json(record_to_dict(record))


def loads_record(text):
    return record_from_dict(json.loads(text))


def write_record(path, record):
    Path(path).write_text(dumps_record(record))


def read_record(path):
    return loads_record(Path(path).read_text())


def write_depth_map(path, dm):
    Path(path).write_text(canonical_json(depth_map_to_dict(dm)))


def read_depth_map(path):
    return depth_map_from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "FormatError", "canonical_json",
    "tokens_to_bytes", "tokens_from_bytes", "write_tokens", "read_tokens",
    "matrix_to_bytes", "matrix_from_bytes", "write_matrix", "read_matrix",
    "record_to_dict", "record_from_dict", "dumps_record", "loads_record",
    "write_record", "read_record", "depth_map_to_dict", "depth_map_from_dict",
    "write_depth_map", "read_depth_map", "schedule_to_dict", "schedule_from_dict",
]
