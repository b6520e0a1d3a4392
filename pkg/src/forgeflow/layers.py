"""Neural network building blocks on top of the tensor engine.

A `Module` owns parameters (Tensors) and submodules; assignment is enough to
register either, and `named_parameters()` walks the tree in insertion order
producing dotted names ("stages.0.blocks.1.depthwise_conv.weight"). All
initializers draw from an explicitly passed numpy Generator so a model built
twice from the same seed is bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Base class: parameter/submodule bookkeeping plus train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_no_decay", set())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def mark_no_decay(self, *names: str) -> None:
        """Flag direct parameters to be skipped by decoupled weight decay."""
        for n in names:
            if n not in self._params:
                raise ConfigError(f"no parameter named {n!r} on {type(self).__name__}")
            self._no_decay.add(n)

    def named_parameters(self, prefix: str = ""):
        """Yield (dotted_name, tensor, no_decay) over the subtree."""
        for name, p in self._params.items():
            yield (prefix + name, p, name in self._no_decay)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p, _ in self.named_parameters()]

    def modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.modules(prefix + name + ".")

    def train(self):
        for _, m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self):
        for _, m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model "
                                 f"shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


class ModuleList(Module):
    """Indexable container; children are registered under their index."""

    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._items))] = m
        self._items.append(m)
        return self

    def __getitem__(self, i) -> Module:
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Linear(Module):
    """Affine map; weight stored [in_features, out_features]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "trunc"):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if init == "trunc":
            w = trunc_normal(rng, (in_features, out_features))
        elif init == "he":
            w = he_normal(rng, (in_features, out_features), in_features)
        elif init == "zero":
            w = np.zeros((in_features, out_features))
        else:
            raise ConfigError(f"unknown linear init {init!r}")
        self.weight = Tensor(w, trainable=True)
        if bias:
            self.bias = Tensor(np.zeros(out_features), trainable=True)
            self.mark_no_decay("bias")
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: input feature size {x.shape[-1]} != "
                             f"{self.in_features}")
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), trainable=True)
        self.beta = Tensor(np.zeros(dim), trainable=True)
        self.mark_no_decay("gamma", "beta")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layer_norm: last dim {x.shape[-1]} != {self.dim}")
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class GroupNorm(Module):
    """Normalize [N,C,H,W] within channel groups, then per-channel affine."""

    def __init__(self, num_groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % num_groups:
            raise ConfigError(f"group_norm: {channels} channels not divisible "
                              f"by {num_groups} groups")
        self.num_groups = num_groups
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), trainable=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), trainable=True)
        self.mark_no_decay("gamma", "beta")

    def __call__(self, x: Tensor) -> Tensor:
        N, C, H, W = x.shape
        if C != self.channels:
            raise ShapeError(f"group_norm: got {C} channels, expected {self.channels}")
        g = self.num_groups
        flat = T.reshape(x, (N, g, (C // g) * H * W))
        normed = T.layer_norm(flat, eps=self.eps)
        out = T.reshape(normed, (N, C, H, W))
        return out * self.gamma + self.beta


class Conv2d(Module):
    """Thin module wrapper around the conv2d op.

    `capture` makes the forward pass keep the output tensor (with its
    gradient retained) on `last_activation`; the class-activation code flips
    it on for the one layer it inspects.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, init: str = "trunc"):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.capture = False
        self.last_activation = None
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if init == "trunc":
            w = trunc_normal(rng, shape)
        elif init == "he":
            w = he_normal(rng, shape, (in_channels // groups) * kernel_size ** 2)
        else:
            raise ConfigError(f"unknown conv init {init!r}")
        self.weight = Tensor(w, trainable=True)
        if bias:
            self.bias = Tensor(np.zeros(out_channels), trainable=True)
            self.mark_no_decay("bias")
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, self.bias, stride=self.stride,
                       padding=self.padding, groups=self.groups)
        if self.capture:
            out.retain_grad()
            # bypass __setattr__: a stored activation is not a parameter
            object.__setattr__(self, "last_activation", out)
        return out


class Dropout(Module):
    """Inverted-scaling dropout; identity in eval mode or at p == 0.

    Mask randomness comes from `self.rng`, reseeded externally (the training
    loop derives one generator per epoch) so runs replay exactly.
    """

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * Tensor(keep)


class SEBlock(Module):
    """Squeeze-and-excitation: global pool, bottleneck MLP, channel gates."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"se_block: {channels} channels not divisible by "
                              f"reduction {reduction}")
        self.channels = channels
        self.squeeze = Linear(channels, channels // reduction, rng)
        self.excite = Linear(channels // reduction, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        N, C, _, _ = x.shape
        s = T.reshape(T.adaptive_avg_pool2d(x), (N, C))
        s = T.relu(self.squeeze(s))
        s = T.sigmoid(self.excite(s))
        return x * T.reshape(s, (N, C, 1, 1))


class Mlp(Module):
    """Two-layer feed-forward with GELU, the transformer block shape."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 out_dim: int | None = None, drop: float = 0.0):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng)
        self.drop = Dropout(drop)

    def __call__(self, x: Tensor) -> Tensor:
        return self.drop(self.fc2(T.gelu(self.fc1(x))))


def relative_position_index(window: int) -> np.ndarray:
    """[w*w, w*w] lookup into the (2w-1)^2 relative position bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0).copy()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1).astype(np.intp)


class WindowAttention(Module):
    """Multi-head self-attention inside one window, with learned relative
    position bias shared across windows."""

    def __init__(self, dim: int, window: int, num_heads: int,
                 rng: np.random.Generator):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"attention dim {dim} not divisible by "
                              f"{num_heads} heads")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, dim * 3, rng)
        self.proj = Linear(dim, dim, rng)
        table = trunc_normal(rng, ((2 * window - 1) ** 2, num_heads))
        self.bias_table = Tensor(table, trainable=True)
        self.mark_no_decay("bias_table")
        self.bias_index = relative_position_index(window)  # fixed buffer

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, N, C = x.shape
        if N != self.window * self.window:
            raise ShapeError(f"window attention: {N} tokens != window^2 = "
                             f"{self.window * self.window}")
        H, hd = self.num_heads, self.head_dim
        qkv = T.reshape(self.qkv(x), (B, N, 3, H, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, N, hd]
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (B, H, N, hd))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (B, H, N, hd))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (B, H, N, hd))
        attn = T.matmul(T.scale(q, self.scale), T.transpose(k, (0, 1, 3, 2)))
        bias = T.take(self.bias_table, self.bias_index.reshape(-1))
        bias = T.transpose(T.reshape(bias, (N, N, H)), (2, 0, 1))
        attn = attn + T.reshape(bias, (1, H, N, N))
        if mask is not None:
            nW = mask.shape[0]
            attn = T.reshape(attn, (B // nW, nW, H, N, N))
            attn = attn + Tensor(mask[None, :, None])
            attn = T.reshape(attn, (B, H, N, N))
        attn = T.softmax(attn, axis=-1)
        out = T.matmul(attn, v)  # [B, H, N, hd]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, C))
        return self.proj(out)
