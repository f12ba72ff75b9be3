"""Masked-image pretraining for SCS-stem Spikformers.

A random subset of patches is hidden; the spiking encoder sees only the
visible ones (sparse convolutions and batch norm in the stem, then a
gather of visible tokens), and a small float transformer decoder
reconstructs the hidden patches in per-patch normalised pixel space.
After pretraining the decoder is dropped and the encoder weights seed a
classifier.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .architecture import ModelConfig, Spikformer
from .errors import (ConfigError, DimensionError, LoadError, NumericError,
                     UnsupportedConfigurationError)
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Tensor
from .training import AdamW, Schedule, clip_grad_norm, iterate_batches, lr_at, param_groups

TARGET_EPS = 1e-6


class MaskPyramid:
    """Patch-level visibility mask (``True`` = visible) and its upsampled copies.

    ``base`` is [gh, gw] or, for per-sample masks, [B, gh, gw].
    """

    def __init__(self, base, ratio: float | None = None):
        base = np.asarray(base).astype(bool)
        if base.ndim not in (2, 3):
            raise DimensionError(f"mask base must be [gh, gw] or [B, gh, gw], got {base.shape}")
        self.base = base
        n = base.shape[-1] * base.shape[-2]
        self.ratio = ratio if ratio is not None else self.num_masked / n

    @property
    def grid(self) -> tuple[int, int]:
        return self.base.shape[-2], self.base.shape[-1]

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def batched(self) -> bool:
        return self.base.ndim == 3

    def _flat(self) -> np.ndarray:
        b = self.base if self.batched else self.base[None]
        return b.reshape(b.shape[0], -1)

    @property
    def num_visible(self) -> int:
        counts = self._flat().sum(axis=1)
        if np.any(counts != counts[0]):
            raise ConfigError("per-sample masks must keep the same number of visible patches")
        return int(counts[0])

    @property
    def num_masked(self) -> int:
        return self.num_tokens - self.num_visible

    def at(self, factor: int) -> np.ndarray:
        return T.upsample_nearest(self.base, factor)

    def at_size(self, size: int) -> np.ndarray:
        gh = self.grid[0]
        if size % gh:
            raise DimensionError(f"resolution {size} is not a multiple of mask grid {gh}")
        return self.at(size // gh)

    def levels(self, patch_size: int = 16) -> dict:
        """Masks at the output of each stem stage, keyed by upsampling factor."""
        out = {}
        f = patch_size // 2
        while f >= 1:
            out[f] = self.at(f)
            f //= 2
        return out

    def visible_indices(self) -> np.ndarray:
        """Row-major flat indices of visible patches, [B, N_v] (B=1 when unbatched)."""
        flat = self._flat()
        nv = self.num_visible
        return np.stack([np.flatnonzero(row)[:nv] for row in flat])

    def masked_indices(self) -> np.ndarray:
        flat = self._flat()
        return np.stack([np.flatnonzero(~row) for row in flat])

    def masked_flat(self) -> np.ndarray:
        """[B, N] indicator of hidden patches as float."""
        return (~self._flat()).astype(np.float64)


def masked_count(n: int, ratio: float) -> int:
    # round half up, so 0.75 * 196 -> 147 exactly
    return int(math.floor(ratio * n + 0.5))


def sample_mask(n: int, ratio: float, seed=None, grid: tuple[int, int] | None = None,
                batch: int | None = None) -> MaskPyramid:
    """Uniformly random mask hiding ``round(ratio * n)`` of ``n`` patches.

    With ``batch`` every sample gets its own draw from the same generator.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ConfigError(f"{n} patches do not form a square grid; pass grid")
        grid = (side, side)
    if grid[0] * grid[1] != n:
        raise ConfigError(f"grid {grid} does not hold {n} patches")
    m = masked_count(n, ratio)
    if m == 0:
        raise ConfigError(f"ratio {ratio} masks no patches out of {n}")
    if m == n:
        raise ConfigError(f"ratio {ratio} leaves no visible patches out of {n}")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(batch or 1):
        vis = np.zeros(n, dtype=bool)
        vis[rng.permutation(n)[m:]] = True
        rows.append(vis.reshape(grid))
    base = np.stack(rows) if batch else rows[0]
    return MaskPyramid(base, ratio)


def _check_scs(encoder: Spikformer):
    if encoder.cfg.stem != "scs":
        raise UnsupportedConfigurationError(
            "masked pretraining needs the SCS stem; SPS pooling mixes masked and visible patches")


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick tokens ``idx`` [B, K] (or [1, K]) from x [T, B, N, D]."""
    b = x.shape[1]
    idx = np.broadcast_to(idx, (b, idx.shape[-1]))
    return x[:, np.arange(b)[:, None], idx]


def encode_visible(images, mask: MaskPyramid, encoder: Spikformer, time_steps: int = 1) -> Tensor:
    """Encoder output for visible patches only, [T, B, N_v, D] in row-major gather order."""
    _check_scs(encoder)
    if mask.grid != (encoder.cfg.grid, encoder.cfg.grid):
        raise DimensionError(f"mask grid {mask.grid} does not match encoder grid {encoder.cfg.grid}")
    x0 = encoder.embed(images, time_steps, mask)
    return encoder.encode(gather_tokens(x0, mask.visible_indices()))


def sincos_pos_embed(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding [gh*gw, dim]; half the channels encode rows."""
    if dim % 4:
        raise ConfigError("sin-cos embedding needs dim divisible by 4")
    gh, gw = grid
    yy, xx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64),
                         indexing="ij")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(yy), enc(xx)], axis=1)


class DecoderLayer(Module):
    """Pre-norm float transformer layer: MHSA and a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rng=None):
        super().__init__()
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng=rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng=rng)

    def _attend(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // h)), axis=-1)
        out = (att @ v).swapaxes(1, 2).reshape(b, n, d)
        return self.proj(out)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self._attend(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class Decoder(Module):
    def __init__(self, enc_dim: int, grid: tuple[int, int], patch_size: int, in_channels: int = 3,
                 dim: int = 256, depth: int = 4, heads: int = 4, mlp_ratio: int = 4, rng=None):
        super().__init__()
        self.grid, self.patch_size, self.in_channels = grid, patch_size, in_channels
        self.embed = Linear(enc_dim, dim, rng=rng)
        self.mask_token = T.parameter(trunc_normal((dim,), rng=rng))
        self._pos = sincos_pos_embed(dim, grid)
        self.layers = [DecoderLayer(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, patch_size * patch_size * in_channels, rng=rng)

    def forward(self, latent: Tensor, mask: MaskPyramid) -> Tensor:
        """``latent`` [T, B, N_v, D] or [B, N_v, D] -> per-patch pixels [B, N, p*p*C]."""
        if latent.ndim == 4:
            latent = latent.mean(axis=0)
        b, nv, _ = latent.shape
        vis = self.embed(latent)
        n = self.grid[0] * self.grid[1]
        dim = vis.shape[-1]
        tokens = T.broadcast_to(self.mask_token.reshape(1, 1, dim), (b, n - nv, dim))
        seq = T.concat([vis, tokens], axis=1)
        order = np.concatenate([mask.visible_indices(), mask.masked_indices()], axis=1)
        restore = np.broadcast_to(np.argsort(order, axis=1), (b, n))
        seq = seq[np.arange(b)[:, None], restore]
        seq = seq + self._pos.astype(seq.dtype)
        for layer in self.layers:
            seq = layer(seq)
        return self.head(self.norm(seq))


def decoder_param_count(enc_dim: int, patch_size: int, in_channels: int = 3, dim: int = 256,
                        depth: int = 4, mlp_ratio: int = 4) -> int:
    layer = (2 * 2 * dim) + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) \
        + (dim * mlp_ratio * dim + mlp_ratio * dim) + (mlp_ratio * dim * dim + dim)
    out = patch_size * patch_size * in_channels
    return (enc_dim * dim + dim) + dim + depth * layer + 2 * dim + (dim * out + out)


def patchify(images, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, p*p*C] with patches row-major and pixels (row, col, channel)."""
    x = np.asarray(images)
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches, patch_size: int, channels: int, grid: tuple[int, int]) -> np.ndarray:
    x = np.asarray(patches)
    b = x.shape[0]
    gh, gw = grid
    p = patch_size
    x = x.reshape(b, gh, gw, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, gh * p, gw * p)


def normalized_targets(images, patch_size: int, eps: float = TARGET_EPS) -> np.ndarray:
    t = patchify(images, patch_size).astype(np.float64)
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    return (t - mu) / np.sqrt(var + eps)


def reconstruction_loss(pred, images, mask: MaskPyramid, patch_size: int,
                        eps: float = TARGET_EPS) -> Tensor:
    """MSE between predictions and per-patch normalised pixels, hidden patches only."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = normalized_targets(images, patch_size, eps).astype(pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    hidden = np.broadcast_to(mask.masked_flat(), pred.shape[:2]).astype(pred.dtype)
    per_patch = ((pred - target) ** 2).mean(axis=-1)
    return (per_patch * hidden).sum() * (1.0 / hidden.sum())


class MaskedAutoencoder(Module):
    """SCS Spikformer encoder plus float reconstruction decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, decoder_dim: int = 256,
                 decoder_depth: int = 4, decoder_heads: int = 4, mask_ratio: float = 0.75):
        super().__init__()
        self.encoder = Spikformer(cfg, seed)
        _check_scs(self.encoder)
        rng = np.random.default_rng(seed + 1)
        self.decoder = Decoder(cfg.dim, (cfg.grid, cfg.grid), cfg.patch_size, cfg.in_channels,
                               decoder_dim, decoder_depth, decoder_heads, rng=rng)
        self.cfg = cfg
        self.mask_ratio = mask_ratio
        self.assign_names()

    def forward(self, images, mask: MaskPyramid, time_steps: int = 1):
        """Returns ``(pred [B, N, p*p*C], loss)``."""
        latent = encode_visible(images, mask, self.encoder, time_steps)
        pred = self.decoder(latent, mask)
        imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
        return pred, reconstruction_loss(pred, imgs, mask, self.cfg.patch_size)

    def reconstruct(self, images, mask: MaskPyramid, time_steps: int = 1) -> np.ndarray:
        """Image-space reconstruction with the original per-patch statistics restored."""
        with T.no_grad():
            pred, _ = self.forward(images, mask, time_steps)
        imgs = np.asarray(images)
        t = patchify(imgs, self.cfg.patch_size)
        mu = t.mean(axis=-1, keepdims=True)
        sd = np.sqrt(t.var(axis=-1, keepdims=True) + TARGET_EPS)
        patches = pred.data * sd + mu
        hidden = mask.masked_flat()[..., None].astype(bool)
        patches = np.where(np.broadcast_to(hidden, patches.shape), patches, t)
        return unpatchify(patches, self.cfg.patch_size, self.cfg.in_channels,
                          (self.cfg.grid, self.cfg.grid))


ARCH_FIELDS = ("depth", "dim", "heads", "in_channels", "img_size", "patch_size", "stem",
               "mlp_ratio", "stem_ratio", "use_rpe", "residual", "variant", "learnable_scale")


def encoder_state(state: dict) -> dict:
    """Encoder weights from a pretraining state dict, decoder and head removed."""
    out = {}
    for k, v in state.items():
        if k.startswith("decoder."):
            continue
        k = k[len("encoder."):] if k.startswith("encoder.") else k
        if k.startswith("head."):
            continue
        out[k] = v
    return out


def finetune_handoff(state: dict, cfg: ModelConfig, source_cfg: ModelConfig | dict | None = None,
                     seed: int = 0) -> Spikformer:
    """Classifier initialised from pretrained encoder weights with a fresh head."""
    if source_cfg is not None:
        src = source_cfg if isinstance(source_cfg, dict) else source_cfg.to_dict()
        tgt = cfg.to_dict()
        bad = [f for f in ARCH_FIELDS if f in src and src[f] != tgt[f]]
        if bad:
            raise LoadError(f"checkpoint config differs from target on {bad}")
    model = Spikformer(cfg, seed)
    enc = encoder_state(state)
    own = {k: v for k, v in model.state_dict().items() if not k.startswith("head.")}
    missing = [k for k in own if k not in enc]
    extra = [k for k in enc if k not in own]
    if missing or extra:
        raise LoadError(f"encoder weights do not fit: missing={missing[:5]} unexpected={extra[:5]}")
    model.load_state_dict(enc, strict=False)
    return model


def fit_pretrain(mae: MaskedAutoencoder, images: np.ndarray, epochs: int, batch_size: int = 16,
                 lr: float = 1e-3, warmup_epochs: float = 0, weight_decay: float = 0.05,
                 mask_ratio: float | None = None, seed: int = 0, time_steps: int = 1,
                 metrics_path=None, log=None) -> list[dict]:
    """Reconstruction training; one fresh per-sample mask per batch."""
    ratio = mask_ratio if mask_ratio is not None else mae.mask_ratio
    n = mae.cfg.num_tokens
    grid = (mae.cfg.grid, mae.cfg.grid)
    rng = np.random.default_rng(seed)
    iters = max(1, math.ceil(len(images) / batch_size))
    sched = Schedule.from_epochs(lr, min(warmup_epochs, epochs), epochs, iters)
    optim = AdamW(param_groups(mae, weight_decay), lr=lr, weight_decay=weight_decay)
    history = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        if fh:
            fh.write("epoch\tlr\ttrain_loss\n")
        it = 0
        for epoch in range(epochs):
            mae.train()
            losses = []
            cur = lr
            for idx in iterate_batches(len(images), batch_size, rng):
                cur = lr_at(sched, it)
                mask = sample_mask(n, ratio, rng, grid, batch=len(idx))
                optim.zero_grad()
                _, loss = mae(images[idx], mask, time_steps)
                value = float(loss.item())
                if not math.isfinite(value):
                    raise NumericError(f"non-finite reconstruction loss at iteration {it}")
                loss.backward()
                clip_grad_norm(optim.params)
                optim.step(cur)
                losses.append(value)
                it += 1
            row = {"epoch": epoch + 1, "lr": cur, "train_loss": float(np.mean(losses))}
            history.append(row)
            if fh:
                fh.write(f"{row['epoch']}\t{row['lr']!r}\t{row['train_loss']!r}\n")
            if log:
                log(row)
    finally:
        if fh:
            fh.close()
    return history
