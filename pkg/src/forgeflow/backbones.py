"""The three branch encoders, each mapping a frame batch to a feature vector.

* MiniConvNeXt: patchify stem, stages of depthwise-7x7 blocks with layer
  scale, downsampling between stages. Consumes normalized RGB frames.
* MiniSwin: patch embedding, window attention blocks with alternating cyclic
  shift, patch merging between stages. Also consumes the RGB frames; its
  windowed token comparisons specialize it toward local texture anomalies.
* FreqBranch: conv stack (conv3x3 -> group-norm -> relu -> maxpool) over the
  log-magnitude spectrum, average-pooled and gated by squeeze-excitation.

All three run per frame; temporal pooling happens downstream. The trailing
projection to the shared embedding width lives in the model assembly, not
here, so these classes end at their native channel width (`out_dim`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, GeometryError
from .layers import (Conv2d, GroupNorm, LayerNorm, Linear, Mlp, Module,
                     ModuleList, SEBlock, WindowAttention)
from .tensor import Tensor


@dataclass
class MiniConvNeXtConfig:
    depths: tuple = (1, 1, 2)
    dims: tuple = (16, 32, 64)
    stem_kernel: int = 4
    stem_stride: int = 4
    dw_kernel: int = 7
    # At full scale the customary layer-scale init is 1e-6, which leaves
    # the blocks asleep until the schedule has run for a long time.  A
    # few hundred desk-scale steps cannot afford that, so the branch
    # defaults to a live value; the block itself still defaults to 1e-6.
    layer_scale_init: float = 0.1

    def __post_init__(self):
        if len(self.depths) != len(self.dims):
            raise DataError("depths and dims must have matching length")


@dataclass
class MiniSwinConfig:
    embed_dim: int = 24
    depths: tuple = (1, 1)
    heads: tuple = (2, 4)
    window: int = 4
    patch: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if len(self.depths) != len(self.heads):
            raise DataError("depths and heads must have matching length")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2 ** i) % h:
                raise DataError(f"stage {i} dim {self.embed_dim * 2 ** i} not "
                                f"divisible by {h} heads")


@dataclass
class FreqBranchConfig:
    channels: tuple = (8, 16, 32)
    se_reduction: int = 4
    gn_groups: int = 8


def _norm_channels(x: Tensor, ln: LayerNorm) -> Tensor:
    """Apply a last-axis LayerNorm over the channel axis of [N,C,H,W]."""
    h = T.transpose(x, (0, 2, 3, 1))
    h = ln(h)
    return T.transpose(h, (0, 3, 1, 2))


class ConvNeXtBlock(Module):
    """depthwise 7x7 -> channel LN -> pointwise x4 -> GELU -> pointwise ->
    layer scale -> residual."""

    def __init__(self, dim: int, rng: np.random.Generator, dw_kernel: int = 7,
                 layer_scale_init: float = 1e-6):
        super().__init__()
        self.depthwise_conv = Conv2d(dim, dim, dw_kernel, rng,
                                     padding=dw_kernel // 2, groups=dim)
        self.norm = LayerNorm(dim)
        self.pw_expand = Linear(dim, 4 * dim, rng)
        self.pw_project = Linear(4 * dim, dim, rng)
        self.layer_scale = Tensor(np.full(dim, layer_scale_init), trainable=True)
        self.mark_no_decay("layer_scale")

    def __call__(self, x: Tensor) -> Tensor:
        h = self.depthwise_conv(x)
        h = T.transpose(h, (0, 2, 3, 1))
        h = self.norm(h)
        h = self.pw_project(T.gelu(self.pw_expand(h)))
        h = h * self.layer_scale
        h = T.transpose(h, (0, 3, 1, 2))
        return x + h


class ConvNeXtStage(Module):
    def __init__(self, in_dim: int, out_dim: int, depth: int,
                 rng: np.random.Generator, downsample: bool, dw_kernel: int,
                 layer_scale_init: float = 1e-6):
        super().__init__()
        if downsample:
            self.down_norm = LayerNorm(in_dim)
            self.down_conv = Conv2d(in_dim, out_dim, 2, rng, stride=2)
        else:
            self.down_norm = None
            self.down_conv = None
        self.blocks = ModuleList(
            [ConvNeXtBlock(out_dim, rng, dw_kernel, layer_scale_init)
             for _ in range(depth)])

    def __call__(self, x: Tensor) -> Tensor:
        if self.down_conv is not None:
            x = self.down_conv(_norm_channels(x, self.down_norm))
        for blk in self.blocks:
            x = blk(x)
        return x


class MiniConvNeXt(Module):
    """RGB branch encoder. `features` returns the final spatial map (what the
    class-activation pass hooks); calling the module returns the pooled,
    normalized vector."""

    def __init__(self, cfg: MiniConvNeXtConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.dims[0], cfg.stem_kernel, rng,
                           stride=cfg.stem_stride)
        self.stem_norm = LayerNorm(cfg.dims[0])
        stages = []
        for i, (depth, dim) in enumerate(zip(cfg.depths, cfg.dims)):
            in_dim = cfg.dims[i - 1] if i else cfg.dims[0]
            stages.append(ConvNeXtStage(in_dim, dim, depth, rng,
                                        downsample=i > 0,
                                        dw_kernel=cfg.dw_kernel,
                                        layer_scale_init=cfg.layer_scale_init))
        self.stages = ModuleList(stages)
        self.head_norm = LayerNorm(cfg.dims[-1])
        self.out_dim = cfg.dims[-1]
        self.total_stride = cfg.stem_stride * 2 ** (len(cfg.depths) - 1)

    def features(self, x: Tensor) -> Tensor:
        _, _, H, W = x.shape
        if H % self.total_stride or W % self.total_stride:
            raise GeometryError(f"input {H}x{W} not divisible by total "
                                f"stride {self.total_stride}")
        h = self.stem(x)
        h = _norm_channels(h, self.stem_norm)
        for stage in self.stages:
            h = stage(h)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        f = self.features(x)
        v = T.reshape(T.adaptive_avg_pool2d(f), (f.shape[0], self.out_dim))
        return self.head_norm(v)


# attention masks for shifted windows, keyed by geometry
_mask_cache: dict[tuple, np.ndarray] = {}


def shift_mask(H: int, W: int, window: int, shift: int) -> np.ndarray:
    """[nW, w*w, w*w] additive mask: -1e9 between tokens whose pre-shift
    regions are not adjacent (they only meet through cyclic wraparound)."""
    key = (H, W, window, shift)
    got = _mask_cache.get(key)
    if got is not None:
        return got
    img = np.zeros((H, W))
    region = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws] = region
            region += 1
    ids = (img.reshape(H // window, window, W // window, window)
           .transpose(0, 2, 1, 3).reshape(-1, window * window))
    mask = np.where(ids[:, None, :] != ids[:, :, None], -1e9, 0.0)
    _mask_cache[key] = mask
    return mask


def window_partition(x: Tensor, window: int) -> Tensor:
    """[N,H,W,C] -> [N*nWindows, window*window, C]."""
    N, H, W, C = x.shape
    h = T.reshape(x, (N, H // window, window, W // window, window, C))
    h = T.transpose(h, (0, 1, 3, 2, 4, 5))
    return T.reshape(h, (N * (H // window) * (W // window), window * window, C))


def window_reverse(x: Tensor, window: int, N: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    h = T.reshape(x, (N, H // window, W // window, window, window, C))
    h = T.transpose(h, (0, 1, 3, 2, 4, 5))
    return T.reshape(h, (N, H, W, C))


class SwinBlock(Module):
    """Pre-norm window attention (optionally cyclically shifted) + MLP."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool,
                 mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        H, W = grid
        N, L, C = x.shape
        w = self.window
        # a shift is meaningless once one window covers the whole grid
        s = w // 2 if self.shifted and min(H, W) > w else 0
        h = T.reshape(self.norm1(x), (N, H, W, C))
        if s:
            h = T.roll(h, (-s, -s), (1, 2))
            mask = shift_mask(H, W, w, s)
        else:
            mask = None
        hw = self.attn(window_partition(h, w), mask=mask)
        h = window_reverse(hw, w, N, H, W)
        if s:
            h = T.roll(h, (s, s), (1, 2))
        x = x + T.reshape(h, (N, L, C))
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """Group 2x2 token neighborhoods, norm, project 4C -> 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        H, W = grid
        N, L, C = x.shape
        h = T.reshape(x, (N, H // 2, 2, W // 2, 2, C))
        h = T.transpose(h, (0, 1, 3, 2, 4, 5))
        h = T.reshape(h, (N, (H // 2) * (W // 2), 4 * C))
        return self.reduce(self.norm(h))


class SwinStage(Module):
    def __init__(self, dim: int, depth: int, heads: int, window: int,
                 mlp_ratio: int, rng: np.random.Generator, merge_from: int | None):
        super().__init__()
        self.merge = PatchMerging(merge_from, rng) if merge_from else None
        self.blocks = ModuleList(
            [SwinBlock(dim, heads, window, shifted=j % 2 == 1,
                       mlp_ratio=mlp_ratio, rng=rng) for j in range(depth)])


class MiniSwin(Module):
    """Texture branch encoder: windowed transformer over 4x4 patches."""

    def __init__(self, cfg: MiniSwinConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Conv2d(3, cfg.embed_dim, cfg.patch, rng,
                                  stride=cfg.patch)
        self.embed_norm = LayerNorm(cfg.embed_dim)
        stages = []
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            dim = cfg.embed_dim * 2 ** i
            stages.append(SwinStage(dim, depth, heads, cfg.window,
                                    cfg.mlp_ratio, rng,
                                    merge_from=dim // 2 if i else None))
        self.stages = ModuleList(stages)
        self.out_dim = cfg.embed_dim * 2 ** (len(cfg.depths) - 1)
        self.final_norm = LayerNorm(self.out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        N, _, H, W = x.shape
        p = self.cfg.patch
        if H % p or W % p:
            raise GeometryError(f"input {H}x{W} not divisible by patch {p}")
        grid = (H // p, W // p)
        h = self.patch_embed(x)
        h = T.reshape(T.transpose(h, (0, 2, 3, 1)),
                      (N, grid[0] * grid[1], self.cfg.embed_dim))
        h = self.embed_norm(h)
        for i, stage in enumerate(self.stages):
            if stage.merge is not None:
                if grid[0] % 2 or grid[1] % 2:
                    raise GeometryError(f"grid {grid} not mergeable at stage {i}")
                h = stage.merge(h, grid)
                grid = (grid[0] // 2, grid[1] // 2)
            if grid[0] % self.cfg.window or grid[1] % self.cfg.window:
                raise GeometryError(f"grid {grid} not divisible by window "
                                    f"{self.cfg.window} at stage {i}")
            for blk in stage.blocks:
                h = blk(h, grid)
        h = self.final_norm(h)
        return T.tmean(h, axis=1)


class FreqConvBlock(Module):
    def __init__(self, cin: int, cout: int, gn_groups: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, padding=1)
        self.norm = GroupNorm(gn_groups, cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.max_pool2d(T.relu(self.norm(self.conv(x))), 2)


class FreqBranch(Module):
    """Spectral branch: conv stack over the [1,H,W] log-magnitude map, then
    global pool and squeeze-excitation on the pooled vector."""

    def __init__(self, cfg: FreqBranchConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        blocks = []
        cin = 1
        for cout in cfg.channels:
            blocks.append(FreqConvBlock(cin, cout, cfg.gn_groups, rng))
            cin = cout
        self.blocks = ModuleList(blocks)
        self.se = SEBlock(cfg.channels[-1], rng, reduction=cfg.se_reduction)
        self.out_dim = cfg.channels[-1]

    def __call__(self, x: Tensor) -> Tensor:
        N, _, H, W = x.shape
        need = 2 ** len(self.cfg.channels)
        if H < need or W < need:
            raise GeometryError(f"input {H}x{W} too small for "
                                f"{len(self.cfg.channels)} pooling stages")
        for blk in self.blocks:
            x = blk(x)
        x = T.adaptive_avg_pool2d(x)
        x = self.se(x)
        return T.reshape(x, (N, self.out_dim))


class Projection(Module):
    """Single linear + layer-norm mapping a branch's native width to the
    shared embedding width."""

    def __init__(self, in_dim: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(in_dim, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.linear(x))
