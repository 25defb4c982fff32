"""Shared builders for the test modules."""
import numpy as np

from xmorpher.attention import AttentionParams, init_attention, w_mca
from xmorpher.tensorcore import Tensor
from xmorpher.windowing import WindowConfig, window_area_partition, window_merge, window_partition


def random_attention(rng, channels, heads, dtype=np.float64, zero_residual=False, randomize_norms=True):
    """AttentionParams with random weights (and random LN affine, so those grads are generic)."""
    raw = init_attention(rng, "blk", channels, dtype, zero_residual=zero_residual)
    if randomize_norms:
        for name in ("norm1_g", "norm1_b", "norm2_g", "norm2_b"):
            key = f"blk.{name}"
            raw[key] = Tensor(raw[key].data + 0.3 * rng.standard_normal(channels), requires_grad=True)
    return AttentionParams.from_params(raw, "blk", heads)


def grid(rng, shape, dtype=np.float64, requires_grad=False):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


def wmca_grid(b, s, p, cfg):
    """Batched W-MCA evaluated on raw grids and merged back, for oracle comparison."""
    return window_merge(w_mca(window_partition(b, cfg), window_area_partition(s, cfg), p))


def random_wmca_case(rng):
    """A random grid pair, parameter set and window config (padding and borders included)."""
    heads = int(rng.choice([1, 2, 4]))
    channels = heads * int(rng.integers(1, 3))
    base = tuple(int(v) for v in rng.integers(1, 3, 3))
    mag = tuple(int(v) for v in rng.choice([1, 3], 3))
    shape = tuple(int(v) for v in rng.integers(1, 5, 3))
    cfg = WindowConfig(base, mag)
    b = grid(rng, shape + (channels,))
    s = grid(rng, shape + (channels,))
    return b, s, random_attention(rng, channels, heads), cfg
