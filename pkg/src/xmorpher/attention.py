"""Window-based multi-head cross attention, the CAT block and the fusion module."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tensorcore import ShapeError, Tensor, gelu, layer_norm, linear, softmax
from .windowing import WindowConfig, WindowSet, window_area_partition, window_merge, window_partition

MLP_RATIO = 4


@dataclass
class AttentionParams:
    norm1_g: Tensor
    norm1_b: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    heads: int = 1

    def __post_init__(self):
        c = self.channels
        if c % self.heads:
            raise ShapeError(f"channel width {c} is not divisible by {self.heads} heads")

    @property
    def channels(self) -> int:
        return self.q_w.shape[0]

    @classmethod
    def tensor_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "heads"]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str, heads: int) -> "AttentionParams":
        return cls(**{name: params[f"{prefix}.{name}"] for name in cls.tensor_names()}, heads=heads)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.tensor_names()]


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_attention(
    rng: np.random.Generator,
    prefix: str,
    channels: int,
    dtype=np.float32,
    mlp_ratio: int = MLP_RATIO,
    zero_residual: bool = False,
) -> dict[str, Tensor]:
    """Parameter arrays of one CAT block, keyed ``prefix.<field>``.

    ``zero_residual`` zeroes the attention output projection and the second
    MLP layer so the block starts as the identity.
    """
    c, hid = channels, mlp_ratio * channels
    arrays = {
        "norm1_g": np.ones(c, dtype),
        "norm1_b": np.zeros(c, dtype),
    }
    for name in ("q", "k", "v", "proj"):
        arrays[f"{name}_w"] = _uniform(rng, c, (c, c), dtype)
        arrays[f"{name}_b"] = _uniform(rng, c, (c,), dtype)
    arrays["norm2_g"] = np.ones(c, dtype)
    arrays["norm2_b"] = np.zeros(c, dtype)
    arrays["fc1_w"] = _uniform(rng, c, (c, hid), dtype)
    arrays["fc1_b"] = _uniform(rng, c, (hid,), dtype)
    arrays["fc2_w"] = _uniform(rng, hid, (hid, c), dtype)
    arrays["fc2_b"] = _uniform(rng, hid, (c,), dtype)
    if zero_residual:
        for name in ("proj_w", "proj_b", "fc2_w", "fc2_b"):
            arrays[name] = np.zeros_like(arrays[name])
    return {f"{prefix}.{k}": Tensor(v, requires_grad=True) for k, v in arrays.items()}


def attention_param_count(channels: int, mlp_ratio: int = MLP_RATIO) -> int:
    c = channels
    return (4 + 2 * mlp_ratio) * c * c + (9 + mlp_ratio) * c


@dataclass
class AttentionDump:
    """Attention weights of one CAT block: (n, heads, s, mu*s) plus window geometry."""

    weights: np.ndarray
    base_origins: np.ndarray
    search_origins: np.ndarray
    base_shape: tuple[int, int, int]
    search_shape: tuple[int, int, int]
    valid: np.ndarray  # (n, mu*s) key validity


def w_mca(s_ba: WindowSet, s_se: WindowSet, p: AttentionParams, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_head) + mask) V per window and head, then output projection.

    Queries come from the base windows, keys and values from the paired
    searching windows. Invalid keys get a -inf logit. Returns the output base
    window set, and the (n, heads, s, mu*s) weights when ``return_weights``.
    """
    if s_ba.count != s_se.count:
        raise ShapeError(f"w_mca: {s_ba.count} base windows vs {s_se.count} searching windows")
    n, s, c = s_ba.tokens.shape
    m = s_se.tokens.shape[1]
    if c != p.channels or s_se.tokens.shape[2] != c:
        raise ShapeError(f"w_mca: token width {c} does not match parameters ({p.channels})")
    h = p.heads
    dh = c // h

    q = linear(s_ba.tokens, p.q_w, p.q_b).reshape(n, s, h, dh).permute(0, 2, 1, 3)
    k = linear(s_se.tokens, p.k_w, p.k_b).reshape(n, m, h, dh).permute(0, 2, 3, 1)
    v = linear(s_se.tokens, p.v_w, p.v_b).reshape(n, m, h, dh).permute(0, 2, 1, 3)

    bias = np.where(s_se.valid, 0.0, -np.inf).astype(q.dtype)[:, None, None, :]
    mask = Tensor(np.broadcast_to(bias, (n, h, s, m)))
    attn = softmax((q @ k) * (1.0 / math.sqrt(dh)) + mask, axis=-1)

    out = (attn @ v).permute(0, 2, 1, 3).reshape(n, s, c)
    out = linear(out, p.proj_w, p.proj_b)
    result = WindowSet("base", out, s_ba.window_shape, s_ba.origins, s_ba.valid, s_ba.grid_shape)
    if return_weights:
        return result, attn.data
    return result


def cat_block(
    b: Tensor,
    s: Tensor,
    p: AttentionParams,
    cfg: WindowConfig,
    dumps: list | None = None,
) -> Tensor:
    """Cross attention transformer block: queries from ``b``, keys/values from ``s``.

    x = b + merge(W-MCA(WP(LN(b)), WAP(LN(s)))); out = x + MLP(LN(x)).
    """
    if b.shape != s.shape:
        raise ShapeError(f"cat_block: base grid {b.shape} and searching grid {s.shape} differ")
    s_ba = window_partition(layer_norm(b, p.norm1_g, p.norm1_b), cfg)
    s_se = window_area_partition(layer_norm(s, p.norm1_g, p.norm1_b), cfg)
    if dumps is None:
        att = w_mca(s_ba, s_se, p)
    else:
        att, weights = w_mca(s_ba, s_se, p, return_weights=True)
        dumps.append(AttentionDump(weights, s_ba.origins, s_se.origins, s_ba.window_shape, s_se.window_shape, s_se.valid))
    x = b + window_merge(att)
    hidden = gelu(linear(layer_norm(x, p.norm2_g, p.norm2_b), p.fc1_w, p.fc1_b))
    return x + linear(hidden, p.fc2_w, p.fc2_b)


def fusion_module(
    t_m: Tensor,
    t_f: Tensor,
    rounds: Sequence[AttentionParams],
    cfg: WindowConfig,
    dumps: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """k rounds of bidirectional CAT exchange; both directions of a round share parameters.

    Each round updates both streams from the pre-round values. ``dumps``, if
    given, collects attention weights keyed ``(round, "mf" | "fm")`` where
    "mf" is the moving stream attending to the fixed one.
    """
    if len(rounds) == 0:
        raise ValueError("fusion_module needs k >= 1 rounds")
    if t_m.shape != t_f.shape:
        raise ShapeError(f"fusion_module: stream shapes {t_m.shape} and {t_f.shape} differ")
    for r, p in enumerate(rounds):
        sink_m = [] if dumps is not None else None
        sink_f = [] if dumps is not None else None
        t_m, t_f = cat_block(t_m, t_f, p, cfg, sink_m), cat_block(t_f, t_m, p, cfg, sink_f)
        if dumps is not None:
            dumps[(r, "mf")] = sink_m[0]
            dumps[(r, "fm")] = sink_f[0]
    return t_m, t_f


def no_cross_block(x: Tensor, p: AttentionParams, cfg: WindowConfig, dumps: list | None = None) -> Tensor:
    """Self-attention variant over a single channel-concatenated stream."""
    return cat_block(x, x, p, cfg, dumps)
