"""Spikformer models: SPS/SCS stems, spiking position embedding, encoder blocks, GAP head.

Activations inside the model are dense 0/1 tensors (or small non-negative
integers on additive residual paths) laid out [T, B, ...]. Convolutions and
batch norms fold T into the batch axis; spiking neurons unfold it again.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, SpikingSelfAttention
from .errors import ConfigError, DimensionError, UsageError
from .neuron import LIF, LifConfig
from .nn import BatchNorm, Conv2d, Linear, MaxPool2d, Module, trace
from .tensor import Tensor

STEM_BLOCKS = 4


@dataclass
class ModelConfig:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    time_steps: int = 4
    num_classes: int = 3
    img_size: int = 32
    in_channels: int = 3
    patch_size: int = 4
    stem: str = "sps"
    variant: str = "ssa"
    order: str = "qk_first"
    residual: str = "add"
    mlp_ratio: int = 4
    stem_ratio: int = 4
    attn_scale: float | None = None
    learnable_scale: bool = False
    use_rpe: bool | None = None
    lif: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stem = self.stem.lower()
        self.residual = self.residual.lower()
        if self.stem not in ("sps", "scs"):
            raise ConfigError(f"stem must be 'sps' or 'scs', got {self.stem!r}")
        if self.residual not in ("add", "iand"):
            raise ConfigError(f"residual must be 'add' or 'iand', got {self.residual!r}")
        if self.dim % 8:
            raise ConfigError("dim must be divisible by 8 for the stem channel schedule")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        downs = math.log2(self.patch_size)
        if downs != int(downs) or not 0 <= downs <= STEM_BLOCKS:
            raise ConfigError(f"patch size must be a power of two up to 16, got {self.patch_size}")
        if self.img_size % self.patch_size:
            raise ConfigError(f"image size {self.img_size} not divisible by patch {self.patch_size}")
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        if self.use_rpe is None:
            self.use_rpe = self.stem == "sps"

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def downsampling_blocks(self) -> list[bool]:
        """Which stem blocks halve the resolution; the last log2(patch) do."""
        downs = int(math.log2(self.patch_size))
        return [i >= STEM_BLOCKS - downs for i in range(STEM_BLOCKS)]

    @property
    def stem_channels(self) -> list[int]:
        return [self.dim // 8, self.dim // 4, self.dim // 2, self.dim]

    def lif_config(self) -> LifConfig:
        return LifConfig(**self.lif)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


_NAME = re.compile(r"^spikformer(-v2)?-(\d+)-(\d+)$")


def config_from_name(name: str, **overrides) -> ModelConfig:
    """``spikformer-L-D`` (SPS stem) or ``spikformer-v2-L-D`` (SCS stem)."""
    m = _NAME.match(name.lower())
    if not m:
        raise ConfigError(f"model name {name!r} does not look like spikformer[-v2]-L-D")
    v2, depth, dim = bool(m.group(1)), int(m.group(2)), int(m.group(3))
    heads = overrides.pop("heads", max(1, dim // 64))
    base = dict(depth=depth, dim=dim, heads=heads, stem="scs" if v2 else "sps")
    base.update(overrides)
    return ModelConfig(**base)


def imagenet_config(name: str, **overrides) -> ModelConfig:
    kw = dict(img_size=224, patch_size=16, num_classes=1000)
    kw.update(overrides)
    return config_from_name(name, **kw)


def iand(sub: Tensor, residual: Tensor) -> Tensor:
    """Binary residual join ``(NOT sub) AND residual``."""
    return (1.0 - sub) * residual


def _fold(x: Tensor) -> Tensor:
    t, b = x.shape[:2]
    return x.reshape(t * b, *x.shape[2:])


def _unfold(x: Tensor, t: int) -> Tensor:
    return x.reshape(t, x.shape[0] // t, *x.shape[1:])


def _mask_at(mask_pyramid, size: int, t: int, b: int):
    """Visibility mask [T*B, 1, size, size] at a given resolution, or None."""
    if mask_pyramid is None:
        return None
    m = mask_pyramid.at_size(size)
    if m.ndim == 2:
        m = m[None]
    m = np.broadcast_to(m[None, :, None], (t, b, 1, size, size))
    return m.reshape(t * b, 1, size, size)


class ConvBNLIF(Module):
    """Conv -> BN -> LIF on [T, B, C, H, W], with optional visibility mask."""

    def __init__(self, c_in, c_out, k, stride, padding, lif: LifConfig, rng=None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride, padding, rng=rng)
        self.bn = BatchNorm(c_out, axis=1)
        self.lif = LIF(lif)

    def forward(self, x: Tensor, masks=None) -> Tensor:
        t = x.shape[0]
        xf = _fold(x)
        if masks is not None:
            xf = xf * masks(xf.shape[-1], t)
        y = self.conv(xf)
        m_out = masks(y.shape[-1], t) if masks is not None else None
        y = self.bn(y, mask=m_out)
        return self.lif(_unfold(y, t))


class SPS(Module):
    """Spiking patch splitting: per block conv3x3 -> BN -> SN -> [maxpool]."""

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        lif = cfg.lif_config()
        chans = [cfg.in_channels] + cfg.stem_channels
        self.blocks = [ConvBNLIF(chans[i], chans[i + 1], 3, 1, 1, lif, rng) for i in range(STEM_BLOCKS)]
        self.pools = [MaxPool2d(2) if down else None for down in cfg.downsampling_blocks]
        self.pools = [p for p in self.pools if p is not None]
        self._pool_at = cfg.downsampling_blocks
        self.cfg = cfg

    def forward(self, img: Tensor, masks=None) -> Tensor:
        if masks is not None:
            raise UsageError("SPS has no sparse path; masked pretraining needs the SCS stem")
        t = img.shape[0]
        x = img
        pools = iter(self.pools)
        for block, pool in zip(self.blocks, self._pool_at):
            x = block(x)
            if pool:
                x = _unfold(next(pools)(_fold(x)), t)
        return x


class SCSBlock(Module):
    def __init__(self, c_in, c_out, downsample: bool, ratio: int, lif: LifConfig, rng=None):
        super().__init__()
        if downsample:
            self.down = ConvBNLIF(c_in, c_out, 2, 2, 0, lif, rng)
        else:
            self.down = ConvBNLIF(c_in, c_out, 3, 1, 1, lif, rng)
        self.expand = ConvBNLIF(c_out, c_out * ratio, 3, 1, 1, lif, rng)
        self.project = ConvBNLIF(c_out * ratio, c_out, 3, 1, 1, lif, rng)

    def forward(self, x, masks=None):
        return self.project(self.expand(self.down(x, masks), masks), masks)


class SCS(Module):
    """Spiking convolutional stem: strided conv downsampling plus an MLP-shaped conv pair per block."""

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        lif = cfg.lif_config()
        chans = [cfg.in_channels] + cfg.stem_channels
        self.blocks = [SCSBlock(chans[i], chans[i + 1], down, cfg.stem_ratio, lif, rng)
                       for i, down in enumerate(cfg.downsampling_blocks)]

    def forward(self, img: Tensor, masks=None) -> Tensor:
        x = img
        for block in self.blocks:
            x = block(x, masks)
        return x


class RPE(Module):
    """Conditional position embedding SN(BN(Conv3x3(x))) on the token grid."""

    def __init__(self, dim: int, lif: LifConfig, rng=None):
        super().__init__()
        self.unit = ConvBNLIF(dim, dim, 3, 1, 1, lif, rng)

    def forward(self, x: Tensor, grid: tuple[int, int] | None = None, masks=None) -> Tensor:
        """``x`` is tokens [T, B, N, D]; returns the embedding in the same layout."""
        t, b, n, d = x.shape
        if grid is None:
            side = int(round(math.sqrt(n)))
            if side * side != n:
                raise UsageError(f"{n} tokens do not form a square grid; pass grid explicitly")
            grid = (side, side)
        gh, gw = grid
        if gh * gw != n:
            raise DimensionError(f"grid {grid} does not hold {n} tokens")
        img = x.reshape(t * b, gh, gw, d).transpose(0, 3, 1, 2)
        y = _unfold(img, t)
        y = self.unit(y, masks)
        return y.reshape(t, b, d, n).swapaxes(-1, -2)


class MLP(Module):
    def __init__(self, dim: int, ratio: int, lif: LifConfig, rng=None):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.bn1 = BatchNorm(hidden, axis=-1)
        self.lif1 = LIF(lif)
        self.fc2 = Linear(hidden, dim, rng=rng)
        self.bn2 = BatchNorm(dim, axis=-1)
        self.lif2 = LIF(lif)

    def forward(self, x: Tensor) -> Tensor:
        h = self.lif1(self.bn1(self.fc1(x)))
        return self.lif2(self.bn2(self.fc2(h)))


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        lif = cfg.lif_config()
        acfg = AttentionConfig(cfg.dim, cfg.heads, cfg.attn_scale, cfg.learnable_scale,
                               cfg.variant, cfg.order)
        self.attn = SpikingSelfAttention(acfg, lif, rng)
        self.mlp = MLP(cfg.dim, cfg.mlp_ratio, lif, rng)
        self.residual = cfg.residual

    def _join(self, sub: Tensor, res: Tensor, tag: str) -> Tensor:
        out = iand(sub, res) if self.residual == "iand" else sub + res
        trace(f"{self.name}.{tag}", out)
        return out

    def forward(self, x: Tensor) -> Tensor:
        x = self._join(self.attn(x), x, "attn_join")
        return self._join(self.mlp(x), x, "mlp_join")


class ClassifierHead(Module):
    def __init__(self, dim: int, num_classes: int, rng=None):
        super().__init__()
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        """Global average over time and tokens of [T, B, N, D], then a linear map."""
        return self.fc(x.mean(axis=(0, 2)))


class Spikformer(Module):
    """Stem -> (+RPE) -> L encoder blocks -> GAP -> linear head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        lif = cfg.lif_config()
        self.stem = SPS(cfg, rng) if cfg.stem == "sps" else SCS(cfg, rng)
        self.rpe = RPE(cfg.dim, lif, rng) if cfg.use_rpe else None
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]
        self.head = ClassifierHead(cfg.dim, cfg.num_classes, rng)
        self.assign_names()

    def _replicate(self, images, time_steps: int | None) -> Tensor:
        t = time_steps or self.cfg.time_steps
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 4:
            x = T.broadcast_to(x.reshape(1, *x.shape), (t,) + x.shape)
        elif x.ndim != 5:
            raise DimensionError(f"expected [B, C, H, W] or [T, B, C, H, W], got {x.shape}")
        c, h, w = x.shape[2:]
        if c != self.cfg.in_channels or h != self.cfg.img_size or w != self.cfg.img_size:
            raise DimensionError(f"input {x.shape} does not match config "
                                 f"({self.cfg.in_channels}, {self.cfg.img_size}, {self.cfg.img_size})")
        return x

    def embed(self, images, time_steps: int | None = None, mask=None) -> Tensor:
        """Stem plus position embedding; returns tokens X_0 [T, B, N, D]."""
        x = self._replicate(images, time_steps)
        t, b = x.shape[:2]
        masks = None
        if mask is not None:
            def masks(size, t_=t, b_=b):
                return _mask_at(mask, size, t_, b_)
            x = x * masks(x.shape[-1]).reshape(t, b, 1, x.shape[-2], x.shape[-1])
        feat = self.stem(x, masks)
        d, gh, gw = feat.shape[2:]
        tokens = feat.reshape(t, b, d, gh * gw).swapaxes(-1, -2)
        trace("stem", tokens)
        if self.rpe is None:
            return tokens
        pe = self.rpe(tokens, (gh, gw), masks)
        x0 = iand(pe, tokens) if self.cfg.residual == "iand" else tokens + pe
        trace("rpe_join", x0)
        return x0

    def encode(self, x0: Tensor) -> Tensor:
        for blk in self.blocks:
            x0 = blk(x0)
        return x0

    def features(self, images, time_steps: int | None = None) -> Tensor:
        return self.encode(self.embed(images, time_steps))

    def forward(self, images, time_steps: int | None = None) -> Tensor:
        return self.head(self.features(images, time_steps))


def classify(x_l, head: ClassifierHead) -> Tensor:
    """Logits from encoder output tokens [T, N, D] (single sample) or [T, B, N, D]."""
    x = x_l if isinstance(x_l, Tensor) else Tensor(x_l)
    if x.ndim == 3:
        return head(x.reshape(x.shape[0], 1, *x.shape[1:])).reshape(-1)
    return head(x)


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count from the declared layer extents."""
    d, r = cfg.dim, cfg.mlp_ratio
    chans = [cfg.in_channels] + cfg.stem_channels

    def conv(ci, co, k):
        return ci * co * k * k

    def bn(c):
        return 2 * c

    total = 0
    for i, down in enumerate(cfg.downsampling_blocks):
        ci, co = chans[i], chans[i + 1]
        if cfg.stem == "sps":
            total += conv(ci, co, 3) + bn(co)
        else:
            e = co * cfg.stem_ratio
            total += conv(ci, co, 2 if down else 3) + bn(co)
            total += conv(co, e, 3) + bn(e) + conv(e, co, 3) + bn(co)
    if cfg.use_rpe:
        total += conv(d, d, 3) + bn(d)
    attn = 4 * (d * d + d) + 4 * bn(d) + (1 if cfg.learnable_scale else 0)
    mlp = (d * r * d + r * d) + bn(r * d) + (r * d * d + d) + bn(d)
    total += cfg.depth * (attn + mlp)
    total += d * cfg.num_classes + cfg.num_classes
    return total
