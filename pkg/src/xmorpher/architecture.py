"""The X-shaped dual U-network producing a displacement field.

Both streams (moving and fixed) share every weight; they differ only in
their input. Exchange happens through a fusion module at each encoder level,
at the bottleneck and at each decoder level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    MLP_RATIO,
    AttentionParams,
    attention_param_count,
    fusion_module,
    init_attention,
    no_cross_block,
)
from .tensorcore import ShapeError, Tensor, concat, grid_sample, linear
from .windowing import WindowConfig

PATCH = 2

ModelParams = dict  # name -> Tensor, insertion-ordered


@dataclass(frozen=True)
class ArchConfig:
    size: tuple[int, int, int] = (16, 16, 16)
    channels: int = 8
    levels: int = 2
    blocks: int = 1
    window: WindowConfig = WindowConfig()
    heads: tuple[int, ...] = (2, 2, 2)
    mlp_ratio: int = MLP_RATIO
    no_cross: bool = False

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.size) != 3:
            raise ValueError(f"size must have three extents, got {self.size}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.blocks < 1:
            raise ValueError("blocks (k) must be >= 1")
        step = PATCH * 2**self.levels
        if any(s % step for s in self.size):
            raise ValueError(
                f"input extents {self.size} must be multiples of {step} "
                f"(patch {PATCH} x 2^{self.levels} levels)"
            )
        if len(self.heads) != self.levels + 1:
            raise ValueError(f"need {self.levels + 1} head counts (one per level incl. bottleneck), got {self.heads}")
        for lvl, h in enumerate(self.heads):
            if h < 1 or self.width(lvl) % h:
                raise ValueError(f"width {self.width(lvl)} at level {lvl} not divisible by {h} heads")

    def width(self, level: int) -> int:
        base = 2 * self.channels if self.no_cross else self.channels
        return base * 2**level

    def extent(self, level: int) -> tuple[int, int, int]:
        f = PATCH * 2**level
        return tuple(s // f for s in self.size)


@dataclass
class Trace:
    """Per-stage stream features and attention weights recorded during a forward pass.

    Stage names are ``enc{l}``, ``bottleneck`` and ``dec{l}``. ``inputs`` and
    ``features`` hold the (moving, fixed) grids before and after the stage's
    fusion module (a single grid for the no-cross model).
    """

    record_attention: bool = True
    inputs: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)


def stage_names(cfg: ArchConfig) -> list[str]:
    return [f"enc{l}" for l in range(cfg.levels)] + ["bottleneck"] + [f"dec{l}" for l in reversed(range(cfg.levels))]


def stage_level(cfg: ArchConfig, stage: str) -> int:
    return cfg.levels if stage == "bottleneck" else int(stage[3:])


# -- parameters ------------------------------------------------------------


def _dense(rng, prefix: str, c_in: int, c_out: int, dtype, zero: bool = False) -> dict[str, Tensor]:
    bound = 1.0 / np.sqrt(c_in)
    if zero:
        w, b = np.zeros((c_in, c_out), dtype), np.zeros(c_out, dtype)
    else:
        w = rng.uniform(-bound, bound, (c_in, c_out)).astype(dtype)
        b = rng.uniform(-bound, bound, c_out).astype(dtype)
    return {f"{prefix}.w": Tensor(w, requires_grad=True), f"{prefix}.b": Tensor(b, requires_grad=True)}


def init_params(cfg: ArchConfig, seed: int = 0, dtype=np.float32, zero_head: bool = True) -> ModelParams:
    """Seeded initialisation; the DVF head is zero so the initial field is the identity."""
    rng = np.random.default_rng(seed)
    in_ch = 2 if cfg.no_cross else 1
    p: ModelParams = {}
    p.update(_dense(rng, "embed", in_ch * PATCH**3, cfg.width(0), dtype))
    for stage in stage_names(cfg):
        lvl = stage_level(cfg, stage)
        c = cfg.width(lvl)
        if stage.startswith("dec"):
            p.update(_dense(rng, f"{stage}.expand", 2 * c, 4 * 2 * c, dtype))
            p.update(_dense(rng, f"{stage}.skip", 2 * c, c, dtype))
        for r in range(cfg.blocks):
            p.update(init_attention(rng, f"{stage}.blk{r}", c, dtype, cfg.mlp_ratio))
        if stage.startswith("enc"):
            p.update(_dense(rng, f"{stage}.merge", 8 * c, 2 * c, dtype))
    head_in = cfg.width(0) if cfg.no_cross else 2 * cfg.width(0)
    p.update(_dense(rng, "head", head_in, 3, dtype, zero=zero_head))
    return p


def param_count(cfg: ArchConfig) -> int:
    """Closed-form number of scalars in :func:`init_params`.

    embed: 8*in*C0 + C0; per encoder level l: k*A(c_l) + 16 c_l^2 + 2 c_l;
    bottleneck: k*A(c_L); per decoder level l: expand 16 c_l^2 + 8 c_l (2 c_l
    to 8 c_l), skip 2 c_l^2 + c_l, k*A(c_l); head 3*(h_in + 1), where
    A(c) = (4 + 2r) c^2 + (9 + r) c for MLP ratio r.
    """
    k, r = cfg.blocks, cfg.mlp_ratio
    in_ch = 2 if cfg.no_cross else 1
    c0 = cfg.width(0)
    total = 8 * in_ch * c0 + c0
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        total += k * attention_param_count(c, r) + 16 * c * c + 2 * c  # encoder
        total += 16 * c * c + 8 * c + 2 * c * c + c + k * attention_param_count(c, r)  # decoder
    total += k * attention_param_count(cfg.width(cfg.levels), r)
    head_in = c0 if cfg.no_cross else 2 * c0
    return total + 3 * head_in + 3


def stage_rounds(params: ModelParams, cfg: ArchConfig, stage: str) -> list[AttentionParams]:
    heads = cfg.heads[stage_level(cfg, stage)]
    return [AttentionParams.from_params(params, f"{stage}.blk{r}", heads) for r in range(cfg.blocks)]


# -- building blocks -------------------------------------------------------


def patch_embed(volume: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping 2^3 patches of a (D, H, W) or (C, D, H, W) volume, projected to tokens."""
    v = volume if volume.ndim == 4 else volume.reshape((1,) + volume.shape)
    c, d, h, w = v.shape
    if d % PATCH or h % PATCH or w % PATCH:
        raise ShapeError(f"patch_embed: extents {(d, h, w)} not divisible by patch size {PATCH}")
    P = PATCH
    x = v.reshape(c, d // P, P, h // P, P, w // P, P).permute(1, 3, 5, 0, 2, 4, 6)
    x = x.reshape(d // P, h // P, w // P, c * P**3)
    return linear(x, weight, bias)


def patch_merge(grid: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate each 2^3 neighbourhood (8c) and project to 2c, halving extents."""
    d, h, w, c = grid.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"patch_merge: extents {(d, h, w)} must be even")
    x = grid.reshape(d // 2, 2, h // 2, 2, w // 2, 2, c).permute(0, 2, 4, 1, 3, 5, 6)
    return linear(x.reshape(d // 2, h // 2, w // 2, 8 * c), weight, bias)


def patch_expand(grid: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Project c to 8*(c/2) and rearrange into a grid of doubled extents and c/2 channels."""
    d, h, w, c = grid.shape
    if c % 2:
        raise ShapeError(f"patch_expand: channel width {c} must be even")
    half = c // 2
    x = linear(grid, weight, bias).reshape(d, h, w, 2, 2, 2, half).permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(2 * d, 2 * h, 2 * w, half)


def upsample_coords(coarse: tuple[int, int, int], fine: tuple[int, int, int], dtype) -> np.ndarray:
    """Sampling positions in a coarse grid for each fine voxel (cell-centre alignment)."""
    axes = [(np.arange(f) + 0.5) * (c / f) - 0.5 for c, f in zip(coarse, fine)]
    return np.stack(np.meshgrid(*axes, indexing="ij")).astype(dtype)


def dvf_head(features: Tensor, weight: Tensor, bias: Tensor, size: tuple[int, int, int]) -> Tensor:
    """Project channel-last features to 3 channels and trilinearly upsample to ``size``."""
    coarse = linear(features, weight, bias).permute(3, 0, 1, 2)
    coords = Tensor(upsample_coords(features.shape[:3], size, features.dtype))
    return grid_sample(coarse, coords)


def _check_inputs(moving: Tensor, fixed: Tensor, cfg: ArchConfig) -> None:
    if moving.shape != fixed.shape:
        raise ShapeError(f"moving {moving.shape} and fixed {fixed.shape} extents differ")
    if tuple(moving.shape) != cfg.size:
        raise ShapeError(f"input extent {moving.shape} does not match configured size {cfg.size}")


# -- forward passes --------------------------------------------------------


def xmorpher_forward(
    moving: Tensor,
    fixed: Tensor,
    params: ModelParams,
    cfg: ArchConfig,
    trace: Trace | None = None,
) -> Tensor:
    """Displacement field (3, D, H, W) in voxel units (Δdepth, Δheight, Δwidth)."""
    if cfg.no_cross:
        return no_cross_forward(moving, fixed, params, cfg, trace)
    _check_inputs(moving, fixed, cfg)
    m = patch_embed(moving, params["embed.w"], params["embed.b"])
    f = patch_embed(fixed, params["embed.w"], params["embed.b"])

    def fuse(stage, m, f):
        dumps = {} if trace is not None and trace.record_attention else None
        if trace is not None:
            trace.inputs[stage] = (m.data, f.data)
        m, f = fusion_module(m, f, stage_rounds(params, cfg, stage), cfg.window, dumps)
        if trace is not None:
            trace.features[stage] = (m.data, f.data)
            if dumps is not None:
                for (r, direction), dump in dumps.items():
                    trace.attention[(stage, r, direction)] = dump
        return m, f

    skips = []
    for lvl in range(cfg.levels):
        m, f = fuse(f"enc{lvl}", m, f)
        skips.append((m, f))
        w, b = params[f"enc{lvl}.merge.w"], params[f"enc{lvl}.merge.b"]
        m, f = patch_merge(m, w, b), patch_merge(f, w, b)
    m, f = fuse("bottleneck", m, f)
    for lvl in reversed(range(cfg.levels)):
        st = f"dec{lvl}"
        ew, eb = params[f"{st}.expand.w"], params[f"{st}.expand.b"]
        sw, sb = params[f"{st}.skip.w"], params[f"{st}.skip.b"]
        skip_m, skip_f = skips[lvl]
        m = linear(concat([patch_expand(m, ew, eb), skip_m], -1), sw, sb)
        f = linear(concat([patch_expand(f, ew, eb), skip_f], -1), sw, sb)
        m, f = fuse(st, m, f)
    return dvf_head(concat([m, f], -1), params["head.w"], params["head.b"], cfg.size)


def no_cross_forward(
    moving: Tensor,
    fixed: Tensor,
    params: ModelParams,
    cfg: ArchConfig,
    trace: Trace | None = None,
) -> Tensor:
    """Single-stream ablation over the channel-concatenated pair, self-attention blocks only."""
    _check_inputs(moving, fixed, cfg)
    pair = concat([moving.reshape((1,) + moving.shape), fixed.reshape((1,) + fixed.shape)], 0)
    x = patch_embed(pair, params["embed.w"], params["embed.b"])

    def blocks(stage, x):
        if trace is not None:
            trace.inputs[stage] = (x.data,)
        for r, p in enumerate(stage_rounds(params, cfg, stage)):
            dumps = [] if trace is not None and trace.record_attention else None
            x = no_cross_block(x, p, cfg.window, dumps)
            if dumps:
                trace.attention[(stage, r, "self")] = dumps[0]
        if trace is not None:
            trace.features[stage] = (x.data,)
        return x

    skips = []
    for lvl in range(cfg.levels):
        x = blocks(f"enc{lvl}", x)
        skips.append(x)
        x = patch_merge(x, params[f"enc{lvl}.merge.w"], params[f"enc{lvl}.merge.b"])
    x = blocks("bottleneck", x)
    for lvl in reversed(range(cfg.levels)):
        st = f"dec{lvl}"
        x = patch_expand(x, params[f"{st}.expand.w"], params[f"{st}.expand.b"])
        x = linear(concat([x, skips[lvl]], -1), params[f"{st}.skip.w"], params[f"{st}.skip.b"])
        x = blocks(st, x)
    return dvf_head(x, params["head.w"], params["head.b"], cfg.size)
