"""Dense-matrix substrate: validation, matmul, softmax, seeded init, file I/O.

Matrices are plain ``numpy.ndarray`` values, two-dimensional, float64,
row-major. Every public operation validates its inputs and returns a fresh
array, so values can be shared freely across threads.

Randomness is pinned to SplitMix64 so that fixtures and distractor samples
reproduce bit-for-bit across platforms and implementations.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ShapeError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

SAPM_MAGIC = b"SAPM"


class SplitMix64:
    """SplitMix64 generator: 64-bit state, identical sequence for a seed.

    Doubles come from the top 53 bits; bounded integers use rejection
    sampling so every value in the range is exactly equally likely.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_double(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high], both ends inclusive."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            u = self.next_u64()
            if u < limit:
                return low + u % span

    def sample(self, population: Sequence, k: int) -> list:
        """Draw k items without replacement, in seeded order."""
        n = len(population)
        if k > n:
            raise ValueError(f"cannot sample {k} items from a population of {n}")
        pool = list(population)
        picked = []
        for i in range(k):
            j = self.randint(i, n - 1)
            pool[i], pool[j] = pool[j], pool[i]
            picked.append(pool[i])
        return picked


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and enforce finiteness."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {m.ndim}-D shape {m.shape}")
    if m.size and not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def row_softmax(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``scale * m`` along each row, stabilized by max subtraction.

    Every output row is nonnegative and sums to 1 even for entries around
    1e6, because the row maximum is subtracted before exponentiation.
    """
    m = as_matrix(m)
    scaled = m * float(scale)
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def random_init(rows: int, cols: int, seed: int, amplitude: float) -> np.ndarray:
    """Matrix with entries uniform in [-amplitude, amplitude], row-major fill.

    Deterministic in (rows, cols, seed, amplitude); amplitude 0 gives zeros.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if amplitude < 0:
        raise ValueError(f"amplitude must be nonnegative, got {amplitude}")
    rng = SplitMix64(seed)
    flat = [amplitude * (2.0 * rng.next_double() - 1.0) for _ in range(rows * cols)]
    return np.array(flat, dtype=np.float64).reshape(rows, cols)


def save_matrix(path: str | Path, m: np.ndarray, fmt: str = "sapm") -> None:
    """Write a matrix as SAPM binary (32-bit floats) or as JSON."""
    m = as_matrix(m)
    path = Path(path)
    if fmt == "sapm":
        header = struct.pack("<4sII", SAPM_MAGIC, m.shape[0], m.shape[1])
        path.write_bytes(header + m.astype("<f4").tobytes())
    elif fmt == "json":
        doc = {"rows": m.shape[0], "cols": m.shape[1], "data": m.ravel().tolist()}
        path.write_text(json.dumps(doc), encoding="utf-8")
    else:
        raise ValueError(f"unknown matrix format {fmt!r} (expected 'sapm' or 'json')")


def load_matrix(path: str | Path) -> np.ndarray:
    """Read a SAPM or JSON matrix file; 32-bit payloads widen to float64."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == SAPM_MAGIC:
        return _decode_sapm(raw, str(path))
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: neither SAPM binary nor JSON matrix ({exc})") from exc
    return _decode_json(doc, str(path))


def _decode_sapm(raw: bytes, origin: str) -> np.ndarray:
    if len(raw) < 12:
        raise ParseError(f"{origin}: truncated SAPM header ({len(raw)} bytes)")
    _, rows, cols = struct.unpack("<4sII", raw[:12])
    expected = 12 + 4 * rows * cols
    if len(raw) != expected:
        raise ParseError(
            f"{origin}: SAPM payload is {len(raw)} bytes, expected {expected} "
            f"for {rows}x{cols}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64)
    try:
        return as_matrix(data.reshape(rows, cols), origin)
    except ValueError as exc:
        raise ParseError(f"{origin}: {exc}") from exc


def _decode_json(doc, origin: str) -> np.ndarray:
    if not isinstance(doc, dict) or not {"rows", "cols", "data"} <= set(doc):
        raise ParseError(f"{origin}: JSON matrix needs keys rows, cols, data")
    rows, cols, data = doc["rows"], doc["cols"], doc["data"]
    if len(data) != rows * cols:
        raise ParseError(
            f"{origin}: data has {len(data)} values, expected {rows * cols} "
            f"for {rows}x{cols}"
        )
    try:
        return as_matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols), origin)
    except ValueError as exc:
        raise ParseError(f"{origin}: {exc}") from exc
