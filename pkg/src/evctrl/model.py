"""Deterministic random-weight diffusion transformer with a control side branch.

The control branch replicates the first half of the block stack; after each of
its blocks, the hidden state is linearly projected and added to the matching
main-branch block input. Weights are untrained but fully determined by the
seed: the caching and scheduling machinery exercised on top is weight-agnostic,
and seeded weights keep every run bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor_ops import (
    FlopCounter,
    Tensor2D,
    attention,
    layer_norm,
    matmul,
    mlp,
    normalize_subset,
)

MAIN = "main"
CONTROL = "control"
BRANCHES = (MAIN, CONTROL)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; control_blocks defaults to half the main stack."""

    grid_side: int = 16
    hidden_dim: int = 64
    num_blocks: int = 12
    heads: int = 4
    control_blocks: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.control_blocks is None:
            object.__setattr__(self, "control_blocks", self.num_blocks // 2)
        if self.grid_side < 2:
            raise ConfigurationError(f"grid_side must be >= 2, got {self.grid_side}")
        if self.num_blocks < 1:
            raise ConfigurationError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.heads < 1:
            raise ConfigurationError(f"heads must be >= 1, got {self.heads}")
        if self.hidden_dim % self.heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if not 1 <= self.control_blocks <= self.num_blocks:
            raise ConfigurationError(
                f"control_blocks {self.control_blocks} outside [1, {self.num_blocks}]"
            )

    @property
    def tokens(self) -> int:
        return self.grid_side * self.grid_side

    def block_count(self, branch: str) -> int:
        return self.num_blocks if branch == MAIN else self.control_blocks

    def to_dict(self) -> dict:
        return {
            "grid_side": self.grid_side,
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "heads": self.heads,
            "control_blocks": self.control_blocks,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: Tensor2D
    wk: Tensor2D
    wv: Tensor2D
    wo: Tensor2D
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: Tensor2D
    b1: np.ndarray
    w2: Tensor2D
    b2: np.ndarray


@dataclass
class ModelWeights:
    """Immutable after construction; shareable across runs."""

    config: ModelConfig
    pos_embed: Tensor2D          # [tokens, dim] position identity
    cond_embed: Tensor2D         # [tokens, dim] per-position condition basis
    main: tuple[BlockWeights, ...]
    control: tuple[BlockWeights, ...]
    control_proj: tuple[Tensor2D, ...]  # [dim, dim] per control block

    def blocks(self, branch: str) -> tuple[BlockWeights, ...]:
        if branch == MAIN:
            return self.main
        if branch == CONTROL:
            return self.control
        raise ConfigurationError(f"unknown branch {branch!r}")

    def block(self, branch: str, layer: int) -> BlockWeights:
        blocks = self.blocks(branch)
        if not 0 <= layer < len(blocks):
            raise IndexError(f"{branch} branch has {len(blocks)} blocks, asked for {layer}")
        return blocks[layer]


@dataclass
class BlockOutput:
    """Pre-residual sublayer deltas; the quantities the cache stores.

    With a row subset the deltas cover only the computed rows (ascending
    index order) and hidden_after keeps the other rows unchanged.
    """

    attn_delta: Tensor2D
    mlp_delta: Tensor2D
    hidden_after: Tensor2D
    hidden_before: Tensor2D


def _draw_block(rng: np.random.Generator, dim: int, scale: float) -> BlockWeights:
    return BlockWeights(
        ln1_gamma=np.ones(dim),
        ln1_beta=np.zeros(dim),
        wq=rng.normal(0.0, scale, (dim, dim)),
        wk=rng.normal(0.0, scale, (dim, dim)),
        wv=rng.normal(0.0, scale, (dim, dim)),
        wo=rng.normal(0.0, scale, (dim, dim)),
        ln2_gamma=np.ones(dim),
        ln2_beta=np.zeros(dim),
        w1=rng.normal(0.0, scale, (dim, 4 * dim)),
        b1=np.zeros(4 * dim),
        w2=rng.normal(0.0, scale, (4 * dim, dim)),
        b2=np.zeros(dim),
    )


def build_model(config: ModelConfig) -> ModelWeights:
    """Draw all weights from a single PCG64 stream seeded with config.seed.

    The draw order is fixed (position embedding, condition embedding, main
    blocks, control blocks, control projections), so equal configs produce
    bit-identical weights. Block matrices use Gaussian scale 1/sqrt(dim).
    The condition embedding uses unit scale so conditioned tokens stand out
    in the norm statistics the selector and profiler key on. Control output
    projections are created exactly zero (the side branch is silent by
    construction) and then overwritten with a small 0.05-scale draw so the
    conditioning has a measurable effect; both phases are deterministic.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dim = config.hidden_dim
    scale = 1.0 / math.sqrt(dim)
    pos_embed = rng.normal(0.0, 1.0, (config.tokens, dim))
    cond_embed = rng.normal(0.0, 1.0, (config.tokens, dim))
    main = tuple(_draw_block(rng, dim, scale) for _ in range(config.num_blocks))
    control = tuple(_draw_block(rng, dim, scale) for _ in range(config.control_blocks))
    projections = []
    for _ in range(config.control_blocks):
        proj = np.zeros((dim, dim))
        proj[:, :] = rng.normal(0.0, 0.05, (dim, dim))
        projections.append(proj)
    return ModelWeights(
        config=config,
        pos_embed=pos_embed,
        cond_embed=cond_embed,
        main=main,
        control=control,
        control_proj=tuple(projections),
    )


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal timestep embedding, added to every token row.

    Frequencies span 1 .. 1/10000 so adjacent steps produce genuinely
    different features and the step-similarity profile is non-degenerate.
    """
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb


def initial_latent(config: ModelConfig, seed: int) -> Tensor2D:
    """Seeded standard-normal starting latent, [tokens, dim]."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((config.tokens, config.hidden_dim))


def branch_inputs(
    weights: ModelWeights, x_t: Tensor2D, condition_tokens: Tensor2D, t: float
) -> tuple[Tensor2D, Tensor2D]:
    """Block-stack inputs for (main, control) at timestep t."""
    config = weights.config
    expected = (config.tokens, config.hidden_dim)
    if x_t.shape != expected:
        raise DimensionError(f"latent shape {x_t.shape} != model grid {expected}")
    if condition_tokens.shape != expected:
        raise DimensionError(
            f"condition tokens shape {condition_tokens.shape} != model grid {expected}"
        )
    temb = timestep_embedding(t, config.hidden_dim)
    main_in = x_t + weights.pos_embed + temb
    return main_in, main_in + condition_tokens


def attn_sublayer(
    block: BlockWeights,
    heads: int,
    hidden: Tensor2D,
    counter: FlopCounter,
    row_subset=None,
) -> Tensor2D:
    """Pre-norm attention sublayer delta for the selected rows.

    Keys and values are projected for every token regardless of the subset,
    so subset rows get exactly the delta a full pass would produce; only the
    Q projection, score rows and output projection are restricted.
    """
    normed = layer_norm(hidden, block.ln1_gamma, block.ln1_beta)
    k = matmul(normed, block.wk, counter)
    v = matmul(normed, block.wv, counter)
    q_rows = normed if row_subset is None else normed[row_subset]
    q = matmul(q_rows, block.wq, counter)
    mixed = attention(q, k, v, heads, counter)
    return matmul(mixed, block.wo, counter)


def mlp_sublayer(block: BlockWeights, rows_after_attn: Tensor2D, counter: FlopCounter) -> Tensor2D:
    """Pre-norm MLP sublayer delta; row-local, so callers pass only the rows they need."""
    normed = layer_norm(rows_after_attn, block.ln2_gamma, block.ln2_beta)
    return mlp(normed, block.w1, block.b1, block.w2, block.b2, counter)


def forward_block(
    weights: ModelWeights,
    branch: str,
    layer: int,
    hidden: Tensor2D,
    counter: FlopCounter,
    row_subset=None,
) -> BlockOutput:
    """One pre-norm transformer block (LN-attn-residual, LN-MLP-residual)."""
    block = weights.block(branch, layer)
    if hidden.ndim != 2 or hidden.shape[1] != weights.config.hidden_dim:
        raise DimensionError(
            f"hidden shape {hidden.shape} incompatible with dim {weights.config.hidden_dim}"
        )
    idx = None if row_subset is None else normalize_subset(row_subset, hidden.shape[0])
    target = slice(None) if idx is None else idx

    attn_delta = attn_sublayer(block, weights.config.heads, hidden, counter, idx)
    after = hidden.copy()
    after[target] = after[target] + attn_delta
    rows_mid = after if idx is None else after[idx]
    mlp_delta = mlp_sublayer(block, rows_mid, counter)
    after[target] = after[target] + mlp_delta
    return BlockOutput(
        attn_delta=attn_delta,
        mlp_delta=mlp_delta,
        hidden_after=after,
        hidden_before=hidden,
    )


def forward_full(
    weights: ModelWeights,
    x_t: Tensor2D,
    condition_tokens: Tensor2D,
    t: float,
    counter: FlopCounter,
) -> tuple[Tensor2D, dict]:
    """Full two-branch forward pass.

    Returns the noise prediction and a dict of every (branch, layer) block
    output, which is what a full cache refresh consumes. The control branch
    runs on the conditioned input; its post-block hidden states are projected
    and added to the matching main block inputs.
    """
    config = weights.config
    main_in, control_in = branch_inputs(weights, x_t, condition_tokens, t)
    outputs: dict[tuple[str, int], BlockOutput] = {}

    injections = []
    h = control_in
    for k in range(config.control_blocks):
        out = forward_block(weights, CONTROL, k, h, counter)
        outputs[(CONTROL, k)] = out
        h = out.hidden_after
        injections.append(matmul(h, weights.control_proj[k], counter))

    h = main_in
    for layer in range(config.num_blocks):
        if layer < config.control_blocks:
            h = h + injections[layer]
        out = forward_block(weights, MAIN, layer, h, counter)
        outputs[(MAIN, layer)] = out
        h = out.hidden_after
    return h, outputs
