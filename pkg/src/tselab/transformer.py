"""Encoder-block operators at initialisation.

Post-norm block (the classic encoder layer), one call = one block::

    P_k   = softmax(X Wq_k (X Wk_k)^T / sqrt(d/h))        step 0, per head
    Y1    = X + alpha [P_1 X W_1 ... P_h X W_h]          step 1
    Y2    = LN(Y1)                                       step 2
    Y3    = Y2 + relu(Y2 W1) W2                          step 3
    Y4    = LN(Y3)                                       step 4

Pre-norm block::

    Xh = LN(X);  Y = X + alpha [P_k(Xh) Xh W_k];  Z = Y + relu(LN(Y) W1) W2

All weights are drawn fresh for every block from the block's random stream;
nothing is trained.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AttentionOverflowError, ShapeError, ValidationError
from .matcore import (
    RngStream,
    as_matrix,
    sample_gaussian,
    sample_uniform_scaled,
    sample_xavier_uniform,
)
from .spectral import check_row_stochastic

__all__ = [
    "AttentionMatrix",
    "BlockConfig",
    "BlockWeights",
    "DiagnosticsSink",
    "LayerNormParams",
    "Placement",
    "Variant",
    "deescalate",
    "ffn_residual",
    "layer_norm",
    "multihead_term",
    "post_norm_block",
    "pre_norm_block",
    "relu",
    "run_stack",
    "sa_residual_multihead",
    "sa_residual_single",
    "sample_block_weights",
    "softmax_attention",
]


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """A validated row-stochastic n x n matrix (read-only)."""

    p: np.ndarray

    def __post_init__(self):
        p = check_row_stochastic(self.p).copy()
        p.flags.writeable = False
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)


class Variant(str, enum.Enum):
    POST_NORM = "post_norm"
    PRE_NORM = "pre_norm"
    POST_NORM_DEESCALATED = "post_norm_deescalated"


class Placement(str, enum.Enum):
    BLOCK_OUTPUT = "block_output"
    FFN_INPUT = "ffn_input"


@dataclass(frozen=True)
class LayerNormParams:
    """Scalar LN affine parameters; ``gain``/``bias`` start at 1 and 0."""

    gain: float = 1.0
    bias: float = 0.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class BlockConfig:
    """Architecture and initialisation hyperparameters of one encoder block.

    ``sigma_sq`` is the per-entry variance of the value weights; ``None``
    means ``1/d`` so that ``d * sigma_sq = 1``. ``value_init`` selects
    between Gaussian value weights (default) and Xavier-uniform ones.
    ``qk_scale`` is the half-width of the uniform query/key weights, default
    ``1/sqrt(d)``.
    """

    n: int = 64
    d: int = 512
    h: int = 8
    alpha: float = 1.0
    q_ffn: int | None = None
    tau: float = 0.0
    variant: Variant = Variant.POST_NORM
    deesc_placement: Placement = Placement.BLOCK_OUTPUT
    sigma_sq: float | None = None
    seed: int = 0
    value_init: str = "gaussian"
    qk_scale: float | None = None
    ln: LayerNormParams = field(default_factory=LayerNormParams)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "deesc_placement", Placement(self.deesc_placement))
        if self.n < 1 or self.d < 2 or self.h < 1:
            raise ValidationError(f"need n >= 1, d >= 2, h >= 1; got n={self.n}, d={self.d}, h={self.h}")
        if self.d % self.h:
            raise ValidationError(f"head count h={self.h} must divide d={self.d}")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.q_ffn is not None and self.q_ffn < self.d:
            raise ValidationError(f"q_ffn={self.q_ffn} must be at least d={self.d}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.sigma_sq is not None and not self.sigma_sq > 0:
            raise ValidationError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if self.value_init not in ("gaussian", "xavier"):
            raise ValidationError(f"value_init must be 'gaussian' or 'xavier', got {self.value_init!r}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def ffn_width(self) -> int:
        return 2 * self.d if self.q_ffn is None else self.q_ffn

    @property
    def value_variance(self) -> float:
        if self.value_init == "xavier":
            return 1.0 / self.d  # 6 / (d + d) / 3
        return 1.0 / self.d if self.sigma_sq is None else self.sigma_sq

    @property
    def d_sigma_sq(self) -> float:
        return self.d * self.value_variance

    @property
    def query_key_scale(self) -> float:
        return 1.0 / np.sqrt(self.d) if self.qk_scale is None else self.qk_scale


@dataclass(frozen=True)
class BlockWeights:
    wq: tuple[np.ndarray, ...]
    wk: tuple[np.ndarray, ...]
    w: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def value_heads(self, h: int) -> list[np.ndarray]:
        return np.split(self.w, h, axis=1)


def sample_block_weights(cfg: BlockConfig, rng: RngStream) -> BlockWeights:
    """Draw every weight of one block, each from its own child stream.

    Children are keyed by name, so replacing one family (e.g. the value
    weights ``"w"``) leaves the others untouched.
    """
    d, dh, s = cfg.d, cfg.head_dim, cfg.query_key_scale
    wq = tuple(sample_uniform_scaled(rng.child("wq", k), d, dh, s) for k in range(cfg.h))
    wk = tuple(sample_uniform_scaled(rng.child("wk", k), d, dh, s) for k in range(cfg.h))
    if cfg.value_init == "xavier":
        w = sample_xavier_uniform(rng.child("w"), d, d)
    else:
        w = sample_gaussian(rng.child("w"), d, d, float(np.sqrt(cfg.value_variance)))
    w1 = sample_xavier_uniform(rng.child("w1"), d, cfg.ffn_width)
    w2 = sample_xavier_uniform(rng.child("w2"), cfg.ffn_width, d)
    return BlockWeights(wq=wq, wk=wk, w=w, w1=w1, w2=w2)


class DiagnosticsSink:
    """Collects named intermediate values emitted by a block.

    Each trial should own its sink; blocks only ever call :meth:`record`.
    """

    def __init__(self):
        self.values: dict[str, object] = {}

    def record(self, name: str, value) -> None:
        self.values[name] = value

    def __getitem__(self, name: str):
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def get(self, name: str, default=None):
        return self.values.get(name, default)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax_attention(x, wq, wk, scale_dim: int) -> AttentionMatrix:
    """Row-wise softmax of ``X Wq (X Wk)^T / sqrt(scale_dim)``."""
    x = as_matrix(x, "X")
    wq = as_matrix(wq, "Wq")
    wk = as_matrix(wk, "Wk")
    if wq.shape[0] != x.shape[1] or wk.shape != wq.shape:
        raise ShapeError(f"query/key weights {wq.shape}, {wk.shape} do not fit X {x.shape}")
    if scale_dim <= 0:
        raise ValidationError(f"scale_dim must be positive, got {scale_dim}")
    with np.errstate(over="ignore", invalid="ignore"):
        m = (x @ wq) @ (x @ wk).T / np.sqrt(scale_dim)
    if not np.all(np.isfinite(m)):
        raise AttentionOverflowError("attention logits contain non-finite values")
    # softmax is shift-invariant per row
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return AttentionMatrix(e / e.sum(axis=1, keepdims=True))


def _attn(p) -> np.ndarray:
    return p.p if isinstance(p, AttentionMatrix) else as_matrix(p, "P")


def sa_residual_single(x, p, w, alpha: float) -> np.ndarray:
    """``X + alpha P X W``."""
    x = as_matrix(x, "X")
    p = _attn(p)
    w = as_matrix(w, "W")
    n, d = x.shape
    if p.shape != (n, n) or w.shape != (d, d):
        raise ShapeError(f"P {p.shape} and W {w.shape} incompatible with X {x.shape}")
    return x + alpha * ((p @ x) @ w)


def multihead_term(x, heads: Sequence[tuple], alpha: float, h: int | None = None) -> np.ndarray:
    """``alpha [P_1 X W_1, ..., P_h X W_h]`` with ``W_k`` of shape d x d/h."""
    x = as_matrix(x, "X")
    n, d = x.shape
    if h is not None and len(heads) != h:
        raise ShapeError(f"expected {h} heads, got {len(heads)}")
    if not heads or d % len(heads):
        raise ShapeError(f"{len(heads)} heads cannot split width d={d}")
    dh = d // len(heads)
    blocks = []
    for k, (p, w) in enumerate(heads):
        p = _attn(p)
        w = as_matrix(w, f"W_{k}")
        if p.shape != (n, n) or w.shape != (d, dh):
            raise ShapeError(f"head {k}: P {p.shape}, W {w.shape} incompatible with X {x.shape}")
        blocks.append((p @ x) @ w)
    return alpha * np.hstack(blocks)


def sa_residual_multihead(x, heads: Sequence[tuple], alpha: float, h: int | None = None) -> np.ndarray:
    """``X + alpha [P_1 X W_1, ..., P_h X W_h]``."""
    x = as_matrix(x, "X")
    return x + multihead_term(x, heads, alpha, h)


def layer_norm(x, params: LayerNormParams | None = None) -> np.ndarray:
    """Row-wise ``gain * (x - mean) / sqrt(var + eps) + bias``."""
    params = params or LayerNormParams()
    x = as_matrix(x, "X")
    if x.shape[1] < 2:
        raise ShapeError("layer norm needs at least two features per row")
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = np.mean(c * c, axis=1, keepdims=True)
    return params.gain * c / np.sqrt(var + params.epsilon) + params.bias


def ffn_residual(x, w1, w2, activation: Callable[[np.ndarray], np.ndarray] = relu) -> np.ndarray:
    """``activation(X W1) W2 + X``."""
    x = as_matrix(x, "X")
    w1 = as_matrix(w1, "W1")
    w2 = as_matrix(w2, "W2")
    d = x.shape[1]
    if w1.shape[0] != d or w2.shape != (w1.shape[1], d):
        raise ShapeError(f"W1 {w1.shape}, W2 {w2.shape} incompatible with X {x.shape}")
    return activation(x @ w1) @ w2 + x


def deescalate(x, tau: float) -> np.ndarray:
    """``(I - tau Pi_1) X``: remove a tau-fraction of the column means."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return x - tau * x.mean(axis=0, keepdims=True)


def _check_input(x, cfg: BlockConfig) -> np.ndarray:
    x = as_matrix(x, "X")
    if x.shape != (cfg.n, cfg.d):
        raise ShapeError(f"input has shape {x.shape}, config expects {(cfg.n, cfg.d)}")
    return x


def _attention_heads(x, weights: BlockWeights, cfg: BlockConfig) -> list[AttentionMatrix]:
    return [softmax_attention(x, wq, wk, cfg.head_dim) for wq, wk in zip(weights.wq, weights.wk)]


def post_norm_block(
    x,
    cfg: BlockConfig,
    rng: RngStream,
    tap: DiagnosticsSink | None = None,
    weights: BlockWeights | None = None,
) -> np.ndarray:
    """One post-norm block; de-escalates when ``cfg.variant`` asks for it.

    Pass ``weights`` to reuse a specific draw instead of sampling from ``rng``.
    """
    x = _check_input(x, cfg)
    weights = weights if weights is not None else sample_block_weights(cfg, rng)
    ps = _attention_heads(x, weights, cfg)
    y1 = sa_residual_multihead(x, list(zip(ps, weights.value_heads(cfg.h))), cfg.alpha, cfg.h)
    y2 = layer_norm(y1, cfg.ln)
    deesc = cfg.variant is Variant.POST_NORM_DEESCALATED
    if deesc and cfg.deesc_placement is Placement.FFN_INPUT:
        y2 = deescalate(y2, cfg.tau)
    y3 = ffn_residual(y2, weights.w1, weights.w2)
    y4 = layer_norm(y3, cfg.ln)
    out = y4
    if deesc and cfg.deesc_placement is Placement.BLOCK_OUTPUT:
        out = deescalate(y4, cfg.tau)
    if tap is not None:
        tap.record("x", x)
        tap.record("attention", ps)
        tap.record("weights", weights)
        for i, y in enumerate((y1, y2, y3, y4), start=1):
            tap.record(f"y{i}", y)
        tap.record("output", out)
    return out


def pre_norm_block(
    x,
    cfg: BlockConfig,
    rng: RngStream,
    tap: DiagnosticsSink | None = None,
    weights: BlockWeights | None = None,
) -> np.ndarray:
    """One pre-norm block.

    The self-attention term carries ``cfg.alpha`` like the post-norm block;
    with the default ``alpha = 1`` it is exactly ``X + P(Xh) Xh W``.
    """
    x = _check_input(x, cfg)
    weights = weights if weights is not None else sample_block_weights(cfg, rng)
    xh = layer_norm(x, cfg.ln)
    ps = _attention_heads(xh, weights, cfg)
    sa = multihead_term(xh, list(zip(ps, weights.value_heads(cfg.h))), cfg.alpha, cfg.h)
    y = x + sa
    z = y + relu(layer_norm(y, cfg.ln) @ weights.w1) @ weights.w2
    if tap is not None:
        tap.record("x", x)
        tap.record("x_hat", xh)
        tap.record("attention", ps)
        tap.record("weights", weights)
        tap.record("sa_term", sa)
        tap.record("y", y)
        tap.record("output", z)
        tap.record(
            "norms",
            {
                "x": float(np.linalg.norm(x)),
                "x_hat": float(np.linalg.norm(xh)),
                "sa_term": float(np.linalg.norm(sa)),
                "y": float(np.linalg.norm(y)),
                "z": float(np.linalg.norm(z)),
            },
        )
    return z


def run_stack(x, cfg: BlockConfig, depth: int, rng: RngStream, callback=None) -> np.ndarray:
    """Compose ``depth`` blocks of ``cfg.variant``; block ``b`` uses ``rng.child(b)``.

    ``callback(b, sink)`` is invoked after each block with that block's sink.
    """
    block = pre_norm_block if cfg.variant is Variant.PRE_NORM else post_norm_block
    for b in range(1, depth + 1):
        sink = DiagnosticsSink() if callback is not None else None
        x = block(x, cfg, rng.child(b), sink)
        if callback is not None:
            callback(b, sink)
    return x
