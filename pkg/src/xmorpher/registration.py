"""Unsupervised registration around the backbone: warping, losses, metrics, data, training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .architecture import ArchConfig, ModelParams, init_params, xmorpher_forward
from .tensorcore import ShapeError, Tensor, backward, box_sum, grid_sample, mean, mul, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Volume:
    """Intensities on an isotropic unit grid with an optional integer label map."""

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be (D, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        if self.labels is not None and self.labels.shape != self.data.shape:
            raise ShapeError(f"label map {self.labels.shape} vs intensities {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class TrainConfig:
    lr: float = 2e-3
    iters: int = 200
    smooth_weight: float = 0.01  # paired with MSE on [0, 1] intensities
    similarity: str = "mse"
    ncc_radius: int = 2
    seed: int = 0
    dice_weight: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")
        if self.similarity not in ("mse", "ncc"):
            raise ValueError(f"unknown similarity {self.similarity!r} (mse | ncc)")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")


# -- warping ---------------------------------------------------------------


def identity_grid(shape, dtype=np.float64) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")).astype(dtype)


def spatial_transform(moving: Tensor, phi: Tensor) -> Tensor:
    """warped(x) = moving(x + phi(x)), trilinear with border clamping.

    ``moving`` is (D, H, W) or (C, D, H, W); ``phi`` is (3, D, H, W).
    """
    if phi.shape != (3,) + tuple(moving.shape[-3:]):
        raise ShapeError(f"spatial_transform: field {phi.shape} does not match volume {moving.shape}")
    return grid_sample(moving, phi + Tensor(identity_grid(phi.shape[1:], phi.dtype)))


def warp_labels(labels: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp of an integer label map, border clamped."""
    phi = np.asarray(phi)
    if phi.shape != (3,) + labels.shape:
        raise ShapeError(f"warp_labels: field {phi.shape} does not match labels {labels.shape}")
    pos = identity_grid(labels.shape) + phi
    idx = [np.clip(np.floor(pos[a] + 0.5).astype(np.int64), 0, n - 1) for a, n in enumerate(labels.shape)]
    return labels[idx[0], idx[1], idx[2]]


def warp_volume(volume: np.ndarray, phi: np.ndarray) -> np.ndarray:
    with no_grad():
        return spatial_transform(Tensor(volume), Tensor(phi)).data


# -- losses ----------------------------------------------------------------


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return mean(mul(d, d))


def local_ncc_loss(a: Tensor, b: Tensor, radius: int = 2, eps: float = 1e-5) -> Tensor:
    """Negative mean squared local normalized cross-correlation over (2r+1)^3 windows.

    Windows are truncated at the border; each uses its own in-volume voxel count.
    """
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"local_ncc_loss: shapes {a.shape} / {b.shape}")
    count = Tensor(box_sum(Tensor(np.ones(a.shape, a.dtype)), radius).data)
    sa, sb = box_sum(a, radius), box_sum(b, radius)
    saa, sbb, sab = box_sum(mul(a, a), radius), box_sum(mul(b, b), radius), box_sum(mul(a, b), radius)
    cross = sab - sa * sb / count
    var_a = saa - sa * sa / count
    var_b = sbb - sb * sb / count
    cc = cross * cross / (var_a * var_b + eps)
    return -mean(cc)


def smoothness_loss(phi: Tensor, weight: float = 1.0) -> Tensor:
    """weight * mean over axes of the mean squared forward difference of phi."""
    terms = []
    for ax in (1, 2, 3):
        n = phi.shape[ax]
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax], lo[ax] = slice(1, n), slice(0, n - 1)
        d = phi[tuple(hi)] - phi[tuple(lo)]
        terms.append(mean(mul(d, d)))
    return (terms[0] + terms[1] + terms[2]) * (weight / 3.0)


def similarity_loss(warped: Tensor, fixed: Tensor, cfg: TrainConfig) -> Tensor:
    if cfg.similarity == "ncc":
        return local_ncc_loss(warped, fixed, cfg.ncc_radius)
    return mse_loss(warped, fixed)


def soft_dice_loss(warped_onehot: Tensor, fixed_onehot: Tensor, eps: float = 1e-6) -> Tensor:
    """1 - mean soft Dice over label channels (auxiliary, semi-supervised hook)."""
    num = mul(warped_onehot, fixed_onehot).sum(axis=(1, 2, 3))
    den = warped_onehot.sum(axis=(1, 2, 3)) + fixed_onehot.sum(axis=(1, 2, 3))
    return 1.0 - mean(num * 2.0 / (den + eps))


def one_hot(labels: np.ndarray, label_set: Sequence[int], dtype=np.float32) -> np.ndarray:
    return np.stack([(labels == l) for l in label_set]).astype(dtype)


# -- metrics ---------------------------------------------------------------


def dsc(labels_a: np.ndarray, labels_b: np.ndarray, label_set: Sequence[int]) -> float:
    """Mean Dice over ``label_set``; labels absent from both maps are skipped."""
    labels_a, labels_b = np.asarray(labels_a), np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ShapeError(f"dsc: label maps {labels_a.shape} and {labels_b.shape} differ")
    if len(label_set) == 0:
        raise ValueError("dsc: empty label set")
    scores = []
    for lab in label_set:
        a, b = labels_a == lab, labels_b == lab
        total = int(a.sum()) + int(b.sum())
        if total == 0:
            continue
        scores.append(2.0 * int((a & b).sum()) / total)
    if not scores:
        raise ValueError("dsc: none of the labels occur in either map")
    return float(np.mean(scores))


def label_union(*maps: np.ndarray) -> list[int]:
    """Nonzero labels present in any of the maps (0 is background)."""
    found = set()
    for m in maps:
        found.update(int(v) for v in np.unique(m))
    found.discard(0)
    return sorted(found)


def jacobian_determinant(phi: np.ndarray) -> np.ndarray:
    """det(I + grad phi) on interior voxels, central differences."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 4 or phi.shape[0] != 3:
        raise ShapeError(f"expected a (3, D, H, W) field, got {phi.shape}")
    if min(phi.shape[1:]) < 3:
        raise ShapeError(f"every extent must be >= 3 for central differences, got {phi.shape[1:]}")
    J = np.empty((3, 3) + tuple(n - 2 for n in phi.shape[1:]))
    for b in range(3):
        for a in range(3):
            fwd = [slice(1, -1)] * 3
            bwd = [slice(1, -1)] * 3
            fwd[b], bwd[b] = slice(2, None), slice(None, -2)
            J[a, b] = (phi[a][tuple(fwd)] - phi[a][tuple(bwd)]) / 2.0 + (a == b)
    return (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )


def jacobian_nonpositive_fraction(phi) -> float:
    """Percentage of interior voxels with det(I + grad phi) <= 0."""
    if isinstance(phi, Tensor):
        phi = phi.data
    det = jacobian_determinant(phi)
    return 100.0 * float((det <= 0).sum()) / det.size


# -- synthetic data --------------------------------------------------------


@dataclass
class SynthPair:
    moving: Volume
    fixed: Volume
    phi_gt: np.ndarray  # moving = fixed warped by phi_gt


MAX_FIELD_GRADIENT = 0.35


def _phantom(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    z, y, x = identity_grid((n, n, n))
    c = (n - 1) / 2.0
    labels = np.zeros((n, n, n), np.uint16)
    intensity = np.zeros((n, n, n))
    # (label, intensity, centre jitter, radii as fractions of n)
    structures = [
        (1, 0.3, 0.03, (0.40, 0.36, 0.38)),
        (2, 0.65, 0.07, (0.24, 0.26, 0.22)),
        (3, 1.0, 0.08, (0.14, 0.16, 0.15)),
    ]
    for lab, val, jitter, radii in structures:
        ctr = c + rng.uniform(-jitter, jitter, 3) * n
        rad = np.array(radii) * n * rng.uniform(0.9, 1.1, 3)
        inside = ((z - ctr[0]) / rad[0]) ** 2 + ((y - ctr[1]) / rad[1]) ** 2 + ((x - ctr[2]) / rad[2]) ** 2 <= 1.0
        labels[inside] = lab
        intensity[inside] = val
    texture = gaussian_filter(rng.standard_normal((n, n, n)), 1.0)
    intensity = intensity + 0.1 * (labels > 0) * texture / np.abs(texture).max()
    return gaussian_filter(intensity, 0.6), labels


def _smooth_field(rng: np.random.Generator, n: int) -> np.ndarray:
    sigma = max(2.0, n / 4.0)
    phi = np.stack([gaussian_filter(rng.standard_normal((n, n, n)), sigma, mode="reflect") for _ in range(3)])
    grad = max(np.abs(np.gradient(phi[a], axis=b)).max() for a in range(3) for b in range(3))
    return phi * (MAX_FIELD_GRADIENT / grad)


def synth_pair(seed: int, extent: int = 16, cfg: ArchConfig | None = None, noise: float = 0.01) -> SynthPair:
    """Seeded phantom pair: nested ellipsoids warped by a smooth random field.

    The field's largest partial derivative is scaled to 0.35 and it is
    redrawn if any interior Jacobian determinant is non-positive.
    """
    if cfg is not None:
        replace(cfg, size=(extent,) * 3)  # raises if the extent does not fit the architecture
    rng = np.random.default_rng(seed)
    fixed_img, fixed_lab = _phantom(rng, extent)
    for _ in range(100):
        phi = _smooth_field(rng, extent)
        if jacobian_nonpositive_fraction(phi) == 0.0:
            break
    else:  # pragma: no cover - not reached for the scaled fields above
        raise RuntimeError("could not draw a fold-free displacement field")
    moving_img = warp_volume(fixed_img, phi)
    moving_lab = warp_labels(fixed_lab, phi)
    fixed_img = fixed_img + noise * rng.standard_normal(fixed_img.shape)
    moving_img = moving_img + noise * rng.standard_normal(moving_img.shape)
    return SynthPair(
        moving=Volume(moving_img.astype(np.float32), moving_lab),
        fixed=Volume(fixed_img.astype(np.float32), fixed_lab),
        phi_gt=phi.astype(np.float32),
    )


# -- optimisation ----------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = (p.data - upd.astype(p.dtype)).astype(p.dtype)
            new.flags.writeable = False
            p.data = new


def registration_loss(pair: SynthPair | tuple[Volume, Volume], params: ModelParams, arch: ArchConfig, cfg: TrainConfig):
    """(total, similarity, smoothness, phi) for one pair."""
    moving, fixed = (pair.moving, pair.fixed) if isinstance(pair, SynthPair) else pair
    dtype = params["head.w"].dtype
    mv = Tensor(moving.data, dtype=dtype)
    fx = Tensor(fixed.data, dtype=dtype)
    phi = xmorpher_forward(mv, fx, params, arch)
    warped = spatial_transform(mv, phi)
    sim = similarity_loss(warped, fx, cfg)
    smooth = smoothness_loss(phi, cfg.smooth_weight)
    total = sim + smooth
    if cfg.dice_weight > 0 and moving.labels is not None and fixed.labels is not None:
        labs = label_union(moving.labels, fixed.labels)
        warped_oh = spatial_transform(Tensor(one_hot(moving.labels, labs, dtype)), phi)
        total = total + soft_dice_loss(warped_oh, Tensor(one_hot(fixed.labels, labs, dtype))) * cfg.dice_weight
    return total, sim, smooth, phi


def train(
    pairs: Sequence,
    arch: ArchConfig,
    cfg: TrainConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[tuple[int, float, float, float]]]:
    """Adam on similarity + smoothness; returns params and rows (iteration, total, similarity, smoothness).

    Row i is the loss evaluated before the i-th update.
    """
    if len(pairs) == 0:
        raise ValueError("train needs at least one pair")
    if params is None:
        params = init_params(arch, cfg.seed)
    tensors = list(params.values())
    opt = Adam(tensors, cfg.lr)
    rows = []
    for it in range(cfg.iters):
        pair = pairs[it % len(pairs)]
        for t in tensors:
            t.grad = None
        total, sim, smooth, _ = registration_loss(pair, params, arch, cfg)
        value = float(total.data)
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at iteration {it} (similarity={float(sim.data)}, "
                f"smoothness={float(smooth.data)}); lower the learning rate"
            )
        rows.append((it, value, float(sim.data), float(smooth.data)))
        backward(total, params=tensors)
        opt.step()
        if it % 20 == 0:
            log.debug("iter %d loss %.6f", it, value)
    return params, rows


def register(moving: Volume, fixed: Volume, params: ModelParams, arch: ArchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inference: (phi, warped intensities)."""
    dtype = params["head.w"].dtype
    with no_grad():
        mv = Tensor(moving.data, dtype=dtype)
        phi = xmorpher_forward(mv, Tensor(fixed.data, dtype=dtype), params, arch)
        warped = spatial_transform(mv, phi)
    return phi.data, warped.data
