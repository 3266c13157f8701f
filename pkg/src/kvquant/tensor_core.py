"""Dense float32 matrices, synthetic KV workloads and the ``KVQT`` tensor file format.

All randomness comes from numpy's ``PCG64`` bit generator seeded with the
workload seed, so generated caches are reproducible across runs and machines.
Per head, keys are drawn first, then values, then the query.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError

TENSOR_MAGIC = b"KVQT"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sIQQ")

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Immutable row-major float32 matrix."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise DomainError(f"DenseMatrix needs a 2-D array, got shape {arr.shape}")
        arr = arr.copy() if arr is self.values else arr
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, rows: int, cols: int, data) -> "DenseMatrix":
        flat = np.asarray(data, dtype=np.float32).ravel()
        if flat.size != rows * cols:
            raise DomainError(f"{rows}x{cols} matrix needs {rows * cols} values, got {flat.size}")
        return cls(flat.reshape(rows, cols))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view."""
        return self.values.ravel()

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.shape == other.shape and self.values.tobytes() == other.values.tobytes()

    def __repr__(self) -> str:
        return f"DenseMatrix({self.rows}x{self.cols})"


# ---------------------------------------------------------------------------
# synthetic workloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    std: float = 1.0

    def validate(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std < 0:
            raise ConfigurationError(f"gaussian needs finite mean and std >= 0, got {self}")


@dataclass(frozen=True)
class HeavyTailed:
    """Student-t entries with ``dof`` degrees of freedom."""

    dof: float = 3.0

    def validate(self) -> None:
        if not math.isfinite(self.dof) or self.dof <= 0:
            raise ConfigurationError(f"heavy_tailed needs dof > 0, got {self.dof}")


@dataclass(frozen=True)
class OutlierChannels:
    """Zero-mean gaussian where a fixed fraction of columns is scaled up."""

    base_std: float = 1.0
    fraction: float = 0.125
    scale: float = 10.0

    def validate(self) -> None:
        if not math.isfinite(self.base_std) or self.base_std < 0:
            raise ConfigurationError(f"outlier_channels needs base_std >= 0, got {self.base_std}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError(f"outlier fraction must lie in [0, 1], got {self.fraction}")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ConfigurationError(f"outlier scale must be > 0, got {self.scale}")

    def outlier_count(self, d: int) -> int:
        return int(math.floor(self.fraction * d + 0.5))


Distribution = Union[Gaussian, HeavyTailed, OutlierChannels]

DISTRIBUTIONS = {
    "gaussian": Gaussian,
    "heavy_tailed": HeavyTailed,
    "outlier_channels": OutlierChannels,
}


@dataclass(frozen=True)
class WorkloadSpec:
    heads: int
    tokens: int
    head_dim: int
    distribution: Distribution = Gaussian()
    seed: int = 0

    def validate(self) -> None:
        for name in ("heads", "tokens", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not isinstance(self.distribution, (Gaussian, HeavyTailed, OutlierChannels)):
            raise ConfigurationError(f"unknown distribution {self.distribution!r}")
        self.distribution.validate()
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class Workload:
    """Stacked per-head tensors: keys/values ``(h, n, d)``, queries ``(h, 1, d)``."""

    spec: WorkloadSpec
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray

    def head(self, i: int) -> tuple[DenseMatrix, DenseMatrix, DenseMatrix]:
        return DenseMatrix(self.keys[i]), DenseMatrix(self.values[i]), DenseMatrix(self.queries[i])

    def __iter__(self):
        return (self.head(i) for i in range(self.spec.heads))

    def __len__(self) -> int:
        return self.spec.heads


def _draw(rng: np.random.Generator, dist: Distribution, n: int, d: int) -> np.ndarray:
    if isinstance(dist, Gaussian):
        out = rng.normal(dist.mean, dist.std, size=(n, d)) if dist.std > 0 else np.full((n, d), dist.mean)
    elif isinstance(dist, HeavyTailed):
        out = rng.standard_t(dist.dof, size=(n, d))
    else:
        out = rng.normal(0.0, 1.0, size=(n, d)) * dist.base_std
        cols = rng.permutation(d)[: dist.outlier_count(d)]
        out[:, cols] *= dist.scale
    return out.astype(np.float32)


def _draw_query(rng: np.random.Generator, dist: Distribution, d: int) -> np.ndarray:
    # queries never carry the outlier channels, only keys and values do
    if isinstance(dist, OutlierChannels):
        return _draw(rng, Gaussian(0.0, dist.base_std), 1, d)
    return _draw(rng, dist, 1, d)


def generate(spec: WorkloadSpec) -> Workload:
    spec.validate()
    h, n, d = spec.heads, spec.tokens, spec.head_dim
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    keys = np.empty((h, n, d), dtype=np.float32)
    values = np.empty((h, n, d), dtype=np.float32)
    queries = np.empty((h, 1, d), dtype=np.float32)
    for i in range(h):
        keys[i] = _draw(rng, spec.distribution, n, d)
        values[i] = _draw(rng, spec.distribution, n, d)
        queries[i] = _draw_query(rng, spec.distribution, d)
    if not (np.isfinite(keys).all() and np.isfinite(values).all() and np.isfinite(queries).all()):
        raise ConfigurationError("distribution parameters produced non-finite samples")
    for arr in (keys, values, queries):
        arr.setflags(write=False)
    return Workload(spec, keys, values, queries)


# ---------------------------------------------------------------------------
# KVQT file format
# ---------------------------------------------------------------------------


def dump_tensor(fh: BinaryIO, m) -> None:
    arr = np.asarray(m, dtype=np.float32)
    if arr.ndim != 2:
        raise DomainError(f"only 2-D tensors can be written, got shape {arr.shape}")
    fh.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.shape[0], arr.shape[1]))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(fh: BinaryIO, check_finite: bool = True) -> DenseMatrix:
    base = fh.tell() if fh.seekable() else 0
    header = fh.read(_TENSOR_HEADER.size)
    if len(header) < _TENSOR_HEADER.size:
        raise FormatError("truncated tensor header", base + len(header))
    magic, version, rows, cols = _TENSOR_HEADER.unpack(header)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}", base)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", base + 4)
    nbytes = rows * cols * 4
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(
            f"truncated data: header declares {rows}x{cols} ({rows * cols} values) "
            f"but only {len(payload) // 4} present",
            base + _TENSOR_HEADER.size + len(payload),
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols)
    if check_finite and not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError("non-finite value in tensor data", base + _TENSOR_HEADER.size + 4 * bad)
    return DenseMatrix(arr)


def write_tensor(path: PathLike, m) -> None:
    with open(path, "wb") as fh:
        dump_tensor(fh, m)


def read_tensor(path: PathLike) -> DenseMatrix:
    with open(path, "rb") as fh:
        m = load_tensor(fh)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("unexpected bytes after tensor data", fh.tell() - 1)
    return m
