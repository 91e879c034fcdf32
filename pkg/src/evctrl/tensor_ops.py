"""Dense float64 kernels with an integrated multiply-accumulate counter.

Everything operates on 2-D row-major numpy arrays of shape [tokens, channels].
Operations are pure; the only mutable argument is the FlopCounter, so callers
running concurrent work must keep one counter per thread. The closed-form
per-block cost model used by the scheduler lives here next to the kernels it
describes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericsError, ParameterError

# A Tensor2D is a [rows, cols] float64 ndarray; rows index tokens, cols channels.
Tensor2D = np.ndarray


class FlopCounter:
    """Running count of multiply-accumulate operations.

    Only matrix-product MACs are counted; additions, activations and
    normalizations are not. Speedup ratios are the quantity of interest and
    are insensitive to those terms. The count is monotone within a run and
    reset only at run boundaries.
    """

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0

    def add(self, macs: int) -> None:
        if macs < 0:
            raise ParameterError(f"negative FLOP increment: {macs}")
        self.total += int(macs)

    def reset(self) -> None:
        self.total = 0


def _require_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NumericsError(f"{op} produced non-finite values")


def normalize_subset(row_subset, rows: int) -> np.ndarray:
    """Canonicalize a token-index set to a sorted, unique intp array."""
    idx = np.unique(np.asarray(list(row_subset), dtype=np.intp))
    if idx.size and (idx[0] < 0 or idx[-1] >= rows):
        raise IndexError(f"row subset {idx.tolist()} out of range for {rows} rows")
    return idx


def matmul(a: Tensor2D, b: Tensor2D, counter: FlopCounter) -> Tensor2D:
    """Matrix product a @ b, counting a.rows * a.cols * b.cols MACs."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    _require_finite(out, "matmul")
    return out


def layer_norm(x: Tensor2D, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> Tensor2D:
    """Normalize each row to zero mean / unit variance, then apply the affine.

    A constant row has zero variance and normalizes to beta.
    """
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layer_norm needs non-empty rows, got shape {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"affine shape mismatch: x has {x.shape[1]} channels, "
            f"gamma {gamma.shape}, beta {beta.shape}"
        )
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps) * gamma + beta
    _require_finite(out, "layer_norm")
    return out


def row_softmax(scores: Tensor2D) -> Tensor2D:
    """Numerically stable softmax along each row; every row sums to 1."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention(
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    heads: int,
    counter: FlopCounter,
    row_subset=None,
) -> Tensor2D:
    """Multi-head scaled dot-product attention over projected q, k, v.

    With row_subset only those query rows are attended and returned (in
    ascending index order). Keys and values always cover every token, so
    the rows that are computed match a full pass exactly.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise DimensionError(
            f"channel mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    dim = q.shape[1]
    if heads < 1 or dim % heads != 0:
        raise ConfigurationError(f"{dim} channels not divisible by {heads} heads")
    q_use = q if row_subset is None else q[normalize_subset(row_subset, q.shape[0])]

    head_dim = dim // heads
    scale = 1.0 / math.sqrt(head_dim)
    out = np.empty((q_use.shape[0], dim))
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores = matmul(q_use[:, sl], k[:, sl].T, counter) * scale
        probs = row_softmax(scores)
        out[:, sl] = matmul(probs, v[:, sl], counter)
    _require_finite(out, "attention")
    return out


# tanh-form GELU; the cubic coefficient is the usual 0.044715.
GELU_CUBIC = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU activation, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_SCALE * (x + GELU_CUBIC * x**3)))


def mlp(
    x: Tensor2D,
    w1: Tensor2D,
    b1: np.ndarray,
    w2: Tensor2D,
    b2: np.ndarray,
    counter: FlopCounter,
    row_subset=None,
) -> Tensor2D:
    """Two-layer GELU MLP applied per row; row_subset restricts computed rows."""
    if x.ndim != 2:
        raise DimensionError(f"mlp input must be 2-D, got {x.shape}")
    if w1.shape[0] != x.shape[1] or w2.shape[0] != w1.shape[1]:
        raise DimensionError(
            f"weight chain broken: input {x.shape} -> w1 {w1.shape} -> w2 {w2.shape}"
        )
    if b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
        raise DimensionError(f"bias shapes {b1.shape}/{b2.shape} do not match weights")
    xs = x if row_subset is None else x[normalize_subset(row_subset, x.shape[0])]
    hidden = gelu(matmul(xs, w1, counter) + b1)
    out = matmul(hidden, w2, counter) + b2
    _require_finite(out, "mlp")
    return out


# ---------------------------------------------------------------------------
# Closed-form per-block cost model (MACs). Mirrors the kernels above exactly:
# a full block pays QKV + output projections (4*n*d^2), score and mixing
# products (2*n^2*d) and the two MLP products (8*n*d^2). A partial block pays
# K/V for every token but Q, scores, mixing, output projection and MLP only
# for the s refreshed rows. A block with nothing to refresh is skipped whole.
# ---------------------------------------------------------------------------


def full_block_flops(tokens: int, dim: int) -> int:
    """MACs for one fully computed transformer block."""
    return 12 * tokens * dim * dim + 2 * tokens * tokens * dim


def partial_block_flops(tokens: int, dim: int, refreshed: int, mode: str = "both") -> int:
    """MACs for one partially refreshed block with `refreshed` fresh rows.

    mode selects which sublayers are recomputed: "both", "attn" or "mlp".
    """
    if refreshed == 0:
        return 0
    mlp_cost = 8 * refreshed * dim * dim
    if mode == "mlp":
        return mlp_cost
    attn_cost = (
        2 * tokens * dim * dim       # K/V projections over all tokens
        + 2 * refreshed * dim * dim  # Q + output projections, fresh rows only
        + 2 * refreshed * tokens * dim  # score and mixing products
    )
    if mode == "attn":
        return attn_cost
    if mode == "both":
        return attn_cost + mlp_cost
    raise ParameterError(f"unknown refresh mode: {mode!r}")
