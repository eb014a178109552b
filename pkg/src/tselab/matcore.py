"""Dense float64 matrices, seeded random streams and the two token projectors.

A "real matrix" here is simply a two-dimensional ``numpy.ndarray`` of dtype
float64. ``project_mean`` and ``project_complement`` apply the orthogonal
projectors onto span{1} (all rows equal) and onto its complement (column
means zero) to the columns of a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "RngStream",
    "as_matrix",
    "matmul",
    "project_mean",
    "project_complement",
    "frobenius_sq",
    "sample_gaussian",
    "sample_uniform_scaled",
    "sample_xavier_uniform",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def project_mean(x) -> np.ndarray:
    """Replace every column by its mean repeated n times."""
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x.mean(axis=0), x.shape).copy()


def project_complement(x) -> np.ndarray:
    """Subtract column means (the projection onto the column-mean-zero subspace)."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0)


def frobenius_sq(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.einsum("ij,ij->", x, x))


@dataclass(frozen=True)
class RngStream:
    """An immutable, splittable handle on a reproducible random stream.

    The pair ``(seed, stream_id)`` plus an optional ``path`` of child indices
    is hashed through :class:`numpy.random.SeedSequence`; every call to
    :meth:`generator` restarts the same sequence, so drawing from a stream
    twice gives identical numbers. Independent draws come from distinct
    children (``stream.child(block, "w")``), which keeps multi-trial runs
    independent of execution order.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.path):
            if not 0 <= int(v) < 2**64:
                raise ValidationError(f"stream keys must be unsigned 64-bit integers, got {v}")

    def child(self, *keys) -> RngStream:
        return RngStream(self.seed, self.stream_id, self.path + tuple(_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id), *self.path))
        return np.random.Generator(np.random.PCG64(ss))


def _key(k) -> int:
    if isinstance(k, str):
        # stable across interpreter runs, unlike hash()
        return int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return int(k)


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def sample_gaussian(rng, rows: int, cols: int, std: float) -> np.ndarray:
    """I.i.d. N(0, std**2) entries.

    ``rng`` may be an :class:`RngStream` (restarted on every call) or a live
    ``numpy.random.Generator`` (advanced by the call).
    """
    if not std > 0:
        raise ValidationError(f"std must be positive, got {std}")
    return _gen(rng).standard_normal((rows, cols)) * std


def sample_uniform_scaled(rng, rows: int, cols: int, scale: float) -> np.ndarray:
    """I.i.d. entries uniform on (-scale, scale)."""
    if not scale > 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    return _gen(rng).uniform(-scale, scale, size=(rows, cols))


def sample_xavier_uniform(rng, rows: int, cols: int) -> np.ndarray:
    """Glorot-uniform initialisation for a ``rows x cols`` weight."""
    return sample_uniform_scaled(rng, rows, cols, float(np.sqrt(6.0 / (rows + cols))))
