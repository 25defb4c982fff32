"""Volume, checkpoint, config and attention-dump file formats.

Volume file: one ASCII header line ``XMVOL1 D H W kind spacing`` followed by a
little-endian row-major payload: float32 for ``scalar``, uint16 for ``label``
and float32 channel-major (3, D, H, W) for ``vector3`` displacement fields.

Checkpoint file (all integers little-endian uint32)::

    b"XMCKPT1\\n"
    config length, config text (key = value lines, UTF-8)
    array count
    per array: name length, name (UTF-8), rank, extents..., float32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .architecture import ArchConfig, ModelParams
from .attention import AttentionDump
from .registration import TrainConfig
from .tensorcore import Tensor
from .windowing import WindowConfig

VOLUME_MAGIC = "XMVOL1"
CKPT_MAGIC = b"XMCKPT1\n"
ATTN_MAGIC = "XMATT1"

_KINDS = {"scalar": np.dtype("<f4"), "label": np.dtype("<u2"), "vector3": np.dtype("<f4")}


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- volumes ---------------------------------------------------------------


def write_volume(path, array: np.ndarray, kind: str = "scalar", spacing: float = 1.0) -> None:
    array = np.asarray(array)
    if kind not in _KINDS:
        raise FormatError(f"unknown volume kind {kind!r}")
    if kind == "vector3":
        if array.ndim != 4 or array.shape[0] != 3:
            raise FormatError(f"vector3 volume must be (3, D, H, W), got {array.shape}")
        dims = array.shape[1:]
    else:
        if array.ndim != 3:
            raise FormatError(f"{kind} volume must be (D, H, W), got {array.shape}")
        dims = array.shape
    if kind == "label" and (array.min(initial=0) < 0 or array.max(initial=0) > 65535):
        raise FormatError("label values must fit in uint16")
    header = f"{VOLUME_MAGIC} {dims[0]} {dims[1]} {dims[2]} {kind} {spacing!r}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=_KINDS[kind]).tobytes())


def read_volume(path) -> tuple[np.ndarray, str]:
    """(array, kind). Rejects bad magic, malformed headers and wrong payload lengths."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0 or end > 256:
        raise FormatError(f"{path}: missing volume header")
    try:
        fields = raw[:end].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not ASCII") from exc
    if len(fields) != 6 or fields[0] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not an {VOLUME_MAGIC} volume header")
    try:
        dims = tuple(int(v) for v in fields[1:4])
        spacing = float(fields[5])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed dims/spacing in header") from exc
    kind = fields[4]
    if kind not in _KINDS or min(dims) < 1 or spacing != 1.0:
        raise FormatError(f"{path}: unsupported kind/dims/spacing {kind} {dims} {spacing}")
    shape = ((3,) if kind == "vector3" else ()) + dims
    dtype = _KINDS[kind]
    payload = raw[end + 1 :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), kind


# -- config ----------------------------------------------------------------

ARCH_KEYS = ("size", "channels", "levels", "blocks", "window", "magnification", "heads", "mlp_ratio", "no_cross")
TRAIN_KEYS = ("lr", "iters", "smooth_weight", "similarity", "ncc_radius", "seed")
OPTIONAL_KEYS = {"dice_weight": "0.0"}


def _ints(value: str, n: int | None = None) -> tuple[int, ...]:
    parts = tuple(int(v) for v in value.replace(" ", "").split(","))
    if n is not None and len(parts) == 1:
        parts = parts * n
    if n is not None and len(parts) != n:
        raise ValueError(f"expected {n} comma-separated integers")
    return parts


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError("expected true/false")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def arch_from_kv(kv: dict[str, str]) -> ArchConfig:
    for key in ARCH_KEYS:
        if key not in kv:
            raise ConfigError(f"missing config key '{key}'")
    try:
        return ArchConfig(
            size=_ints(kv["size"], 3),
            channels=int(kv["channels"]),
            levels=int(kv["levels"]),
            blocks=int(kv["blocks"]),
            window=WindowConfig(_ints(kv["window"], 3), _ints(kv["magnification"], 3)),
            heads=_ints(kv["heads"]),
            mlp_ratio=int(kv["mlp_ratio"]),
            no_cross=_bool(kv["no_cross"]),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid architecture config: {exc}") from exc


def train_from_kv(kv: dict[str, str]) -> TrainConfig:
    for key in TRAIN_KEYS:
        if key not in kv:
            raise ConfigError(f"missing config key '{key}'")
    try:
        return TrainConfig(
            lr=float(kv["lr"]),
            iters=int(kv["iters"]),
            smooth_weight=float(kv["smooth_weight"]),
            similarity=kv["similarity"],
            ncc_radius=int(kv["ncc_radius"]),
            seed=int(kv["seed"]),
            dice_weight=float(kv.get("dice_weight", OPTIONAL_KEYS["dice_weight"])),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def load_config(path) -> tuple[ArchConfig, TrainConfig]:
    kv = parse_kv(Path(path).read_text())
    unknown = sorted(set(kv) - set(ARCH_KEYS) - set(TRAIN_KEYS) - set(OPTIONAL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    return arch_from_kv(kv), train_from_kv(kv)


def arch_to_text(cfg: ArchConfig) -> str:
    join = lambda t: ",".join(str(v) for v in t)  # noqa: E731
    rows = {
        "size": join(cfg.size),
        "channels": cfg.channels,
        "levels": cfg.levels,
        "blocks": cfg.blocks,
        "window": join(cfg.window.base),
        "magnification": join(cfg.window.magnification),
        "heads": join(cfg.heads),
        "mlp_ratio": cfg.mlp_ratio,
        "no_cross": str(cfg.no_cross).lower(),
    }
    return "".join(f"{k} = {v}\n" for k, v in rows.items())


def train_to_text(cfg: TrainConfig) -> str:
    rows = {
        "lr": repr(cfg.lr),
        "iters": cfg.iters,
        "smooth_weight": repr(cfg.smooth_weight),
        "similarity": cfg.similarity,
        "ncc_radius": cfg.ncc_radius,
        "seed": cfg.seed,
        "dice_weight": repr(cfg.dice_weight),
    }
    return "".join(f"{k} = {v}\n" for k, v in rows.items())


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, cfg: ArchConfig, params: ModelParams) -> None:
    chunks = [CKPT_MAGIC]
    text = arch_to_text(cfg).encode("utf-8")
    chunks.append(struct.pack("<I", len(text)) + text)
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[ArchConfig, ModelParams]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an XMCKPT1 checkpoint")
    r = _Reader(raw, path)
    r.take(len(CKPT_MAGIC))
    try:
        cfg = arch_from_kv(parse_kv(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad embedded config: {exc}") from exc
    params: ModelParams = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"{path}: implausible rank {rank} for '{name}'")
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return cfg, params


# -- attention dumps -------------------------------------------------------


def write_attention_window(path, dump: AttentionDump, window: int) -> None:
    """One window: header ``XMATT1 heads queries keys bd bh bw sd sh sw`` then float32 (heads, s, mu*s)."""
    w = np.ascontiguousarray(dump.weights[window], dtype="<f4")
    heads, s, m = w.shape
    bo = dump.base_origins[window]
    so = dump.search_origins[window]
    header = f"{ATTN_MAGIC} {heads} {s} {m} {bo[0]} {bo[1]} {bo[2]} {so[0]} {so[1]} {so[2]}\n"
    Path(path).write_bytes(header.encode("ascii") + w.tobytes())


def read_attention_window(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(weights (heads, s, mu*s), base origin, searching origin)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    fields = raw[:end].decode("ascii", "replace").split() if end > 0 else []
    if len(fields) != 10 or fields[0] != ATTN_MAGIC:
        raise FormatError(f"{path}: not an {ATTN_MAGIC} file")
    heads, s, m = (int(v) for v in fields[1:4])
    payload = raw[end + 1 :]
    if len(payload) != 4 * heads * s * m:
        raise FormatError(f"{path}: payload length {len(payload)} does not match {heads}x{s}x{m}")
    w = np.frombuffer(payload, dtype="<f4").reshape(heads, s, m).astype(np.float32)
    return w, np.array([int(v) for v in fields[4:7]]), np.array([int(v) for v in fields[7:10]])


def write_pgm(path, image: np.ndarray) -> None:
    """Binary portable graymap (P5), intensities rescaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
