"""Full detector assembly: three branch encoders with shared-width
projections, per-branch temporal attention pooling, a fusion gate producing
convex branch weights, and the two-layer classifier head.

Parameter bookkeeping for the optimizer and the unfreezing schedule lives in
`ParamRegistry`: every parameter appears exactly once with a group tag from
{projection, classifier, head, backbone_last, backbone_mid, backbone_early}.
Backbone tags follow position: stem plus first stage is "early", the final
stage plus its norm is "last", anything between is "mid".
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbones import (FreqBranch, FreqBranchConfig, MiniConvNeXt,
                        MiniConvNeXtConfig, MiniSwin, MiniSwinConfig,
                        Projection)
from .errors import ConfigError, DataError, ShapeError
from .layers import Dropout, Linear, Module
from .prng import derive_seed
from .tensor import Tensor

BRANCHES = ("rgb", "tex", "freq")


@dataclass(frozen=True)
class BranchMask:
    """Which branches participate; at least one must stay on."""
    use_rgb: bool = True
    use_tex: bool = True
    use_freq: bool = True

    def __post_init__(self):
        if not (self.use_rgb or self.use_tex or self.use_freq):
            raise ConfigError("branch mask disables every branch")

    @property
    def flags(self) -> tuple:
        return (self.use_rgb, self.use_tex, self.use_freq)

    def enabled(self, branch: str) -> bool:
        return self.flags[BRANCHES.index(branch)]

    @classmethod
    def from_names(cls, names) -> "BranchMask":
        if isinstance(names, str):
            names = [n for n in names.split(",") if n]
        bad = set(names) - set(BRANCHES)
        if bad:
            raise ConfigError(f"unknown branch names {sorted(bad)}; "
                              f"choose from {BRANCHES}")
        return cls("rgb" in names, "tex" in names, "freq" in names)

    def short(self) -> str:
        return "+".join(b for b in BRANCHES if self.enabled(b))


@dataclass
class DetectorConfig:
    d: int = 64
    head_hidden: int = 64
    head_dropout: float = 0.3
    rgb: MiniConvNeXtConfig = field(default_factory=MiniConvNeXtConfig)
    tex: MiniSwinConfig = field(default_factory=MiniSwinConfig)
    freq: FreqBranchConfig = field(default_factory=FreqBranchConfig)

    def __post_init__(self):
        if self.d % 2:
            raise ConfigError(f"embedding width must be even, got {self.d}")

    def as_meta(self) -> dict:
        """JSON-safe geometry description, embedded in checkpoints so a
        saved model can be rebuilt without its original config file."""
        return {
            "d": self.d,
            "head_hidden": self.head_hidden,
            "head_dropout": self.head_dropout,
            "rgb": {"depths": list(self.rgb.depths),
                    "dims": list(self.rgb.dims),
                    "stem_kernel": self.rgb.stem_kernel,
                    "stem_stride": self.rgb.stem_stride,
                    "dw_kernel": self.rgb.dw_kernel,
                    "layer_scale_init": self.rgb.layer_scale_init},
            "tex": {"embed_dim": self.tex.embed_dim,
                    "depths": list(self.tex.depths),
                    "heads": list(self.tex.heads),
                    "window": self.tex.window,
                    "patch": self.tex.patch,
                    "mlp_ratio": self.tex.mlp_ratio},
            "freq": {"channels": list(self.freq.channels),
                     "se_reduction": self.freq.se_reduction,
                     "gn_groups": self.freq.gn_groups},
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "DetectorConfig":
        try:
            rgb = dict(meta["rgb"])
            tex = dict(meta["tex"])
            freq = dict(meta["freq"])
            for key in ("depths", "dims"):
                rgb[key] = tuple(rgb[key])
            for key in ("depths", "heads"):
                tex[key] = tuple(tex[key])
            freq["channels"] = tuple(freq["channels"])
            return cls(d=int(meta["d"]),
                       head_hidden=int(meta["head_hidden"]),
                       head_dropout=float(meta["head_dropout"]),
                       rgb=MiniConvNeXtConfig(**rgb),
                       tex=MiniSwinConfig(**tex),
                       freq=FreqBranchConfig(**freq))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model geometry metadata: {exc}") \
                from None

    @classmethod
    def tiny(cls) -> "DetectorConfig":
        """Minimal geometry for finite-difference checks (8x8 inputs)."""
        return cls(d=8, head_hidden=8, head_dropout=0.0,
                   rgb=MiniConvNeXtConfig(depths=(1, 1), dims=(4, 8),
                                          stem_kernel=2, stem_stride=2),
                   tex=MiniSwinConfig(embed_dim=4, depths=(1,), heads=(2,),
                                      window=2, patch=2),
                   freq=FreqBranchConfig(channels=(4, 8), gn_groups=2,
                                         se_reduction=2))

    @classmethod
    def paper_shape(cls) -> "DetectorConfig":
        """Full-size geometry (224x224, d=512); for shape contracts only."""
        return cls(d=512, head_hidden=512,
                   rgb=MiniConvNeXtConfig(dims=(32, 64, 128)),
                   tex=MiniSwinConfig(embed_dim=32, window=7),
                   freq=FreqBranchConfig(channels=(16, 32, 64)))


class TemporalPooler(Module):
    """Additive-score attention over the K frames of one segment."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.score1 = Linear(d, d // 2, rng)
        self.score2 = Linear(d // 2, 1, rng)

    def __call__(self, feats: Tensor):
        N, K, d = feats.shape
        if K < 1:
            raise DataError("temporal pooling over an empty segment")
        scores = self.score2(T.tanh(self.score1(feats)))
        weights = T.softmax(T.reshape(scores, (N, K)), axis=-1)
        pooled = T.tsum(feats * T.reshape(weights, (N, K, 1)), axis=1)
        return pooled, weights


class FusionGate(Module):
    """Concat the three pooled features, emit one logit per branch, softmax
    to convex weights. Masked branches are pinned to weight zero."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.gate = Linear(3 * d, 3, rng)

    def __call__(self, f_rgb: Tensor, f_tex: Tensor, f_freq: Tensor,
                 mask: BranchMask):
        N, d = f_rgb.shape
        logits = self.gate(T.concat([f_rgb, f_tex, f_freq], axis=1))
        penalty = np.where(mask.flags, 0.0, -1e9)
        if (penalty != 0).any():
            logits = logits + Tensor(penalty)
        alphas = T.softmax(logits, axis=-1)
        fused = None
        for i, f in enumerate((f_rgb, f_tex, f_freq)):
            term = f * T.narrow(alphas, 1, i, 1)
            fused = term if fused is None else fused + term
        return fused, alphas


class ClassifierHead(Module):
    """Two-layer head emitting the pre-sigmoid fake score."""

    def __init__(self, d: int, hidden: int, dropout: float,
                 rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng)
        self.drop = Dropout(dropout)
        self.fc2 = Linear(hidden, 1, rng)

    def __call__(self, fused: Tensor) -> Tensor:
        h = self.drop(T.gelu(self.fc1(fused)))
        return T.reshape(self.fc2(h), (fused.shape[0],))


@dataclass
class SegmentOutput:
    prob: Tensor          # [N] fake probability
    logit: Tensor         # [N] pre-sigmoid score (class-activation target)
    alphas: Tensor        # [N,3] branch weights, masked entries exactly 0
    frame_weights: dict   # branch -> [N,K] temporal attention


class Detector(Module):
    """End-to-end tri-branch segment classifier."""

    def __init__(self, cfg: DetectorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        rng = np.random.default_rng(derive_seed(seed, "model-init"))
        d = self.cfg.d
        self.rgb_back = MiniConvNeXt(self.cfg.rgb, rng)
        self.tex_back = MiniSwin(self.cfg.tex, rng)
        self.freq_back = FreqBranch(self.cfg.freq, rng)
        self.rgb_proj = Projection(self.rgb_back.out_dim, d, rng)
        self.tex_proj = Projection(self.tex_back.out_dim, d, rng)
        self.freq_proj = Projection(self.freq_back.out_dim, d, rng)
        self.rgb_pool = TemporalPooler(d, rng)
        self.tex_pool = TemporalPooler(d, rng)
        self.freq_pool = TemporalPooler(d, rng)
        self.fusion = FusionGate(d, rng)
        self.classifier = ClassifierHead(d, self.cfg.head_hidden,
                                         self.cfg.head_dropout, rng)

    def _branch(self, name: str, flat: Tensor) -> Tensor:
        back = getattr(self, f"{name}_back")
        proj = getattr(self, f"{name}_proj")
        return proj(back(flat))

    def forward_segment(self, frames, freq_maps,
                        mask: BranchMask | None = None) -> SegmentOutput:
        mask = mask or BranchMask()
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        freq_maps = freq_maps if isinstance(freq_maps, Tensor) else Tensor(freq_maps)
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise ShapeError(f"frames must be [N,K,3,H,W], got {tuple(frames.shape)}")
        N, K, _, H, W = frames.shape
        if tuple(freq_maps.shape) != (N, K, 1, H, W):
            raise ShapeError(f"freq maps must be [N,K,1,H,W] matching frames, "
                             f"got {tuple(freq_maps.shape)}")
        d = self.cfg.d
        pooled, weights = {}, {}
        for name in BRANCHES:
            if not mask.enabled(name):
                # masked: no computation at all; uniform weights for telemetry
                pooled[name] = Tensor(np.zeros((N, d)))
                weights[name] = Tensor(np.full((N, K), 1.0 / K))
                continue
            src = freq_maps if name == "freq" else frames
            ch = 1 if name == "freq" else 3
            flat = T.reshape(src, (N * K, ch, H, W))
            feats = T.reshape(self._branch(name, flat), (N, K, d))
            pooled[name], weights[name] = getattr(self, f"{name}_pool")(feats)
        fused, alphas = self.fusion(pooled["rgb"], pooled["tex"],
                                    pooled["freq"], mask)
        logit = self.classifier(fused)
        return SegmentOutput(prob=T.sigmoid(logit), logit=logit,
                             alphas=alphas, frame_weights=weights)


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    group: str
    no_decay: bool
    locked: bool = False  # excluded from optimization (ablation retrain)


class ParamRegistry:
    """Flat, ordered view of every model parameter with its schedule group."""

    def __init__(self, entries: list):
        self.entries = entries
        self.by_name = {e.name: e for e in entries}
        if len(self.by_name) != len(entries):
            raise ConfigError("duplicate parameter names in registry")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def groups(self) -> set:
        return {e.group for e in self.entries}

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for e in self.entries:
            e.tensor.trainable = e.group in groups and not e.locked

    def trainable_entries(self) -> list:
        return [e for e in self.entries if e.tensor.trainable and not e.locked]

    def lock_branches(self, mask: BranchMask) -> None:
        """Lock all parameters belonging to branches the mask disables."""
        off = [b for b in BRANCHES if not mask.enabled(b)]
        for e in self.entries:
            if any(e.name.startswith(f"{b}_") for b in off):
                e.locked = True
                e.tensor.trainable = False


_STAGE_RE = re.compile(r"\.(?:stages|blocks)\.(\d+)\.")


def _backbone_group(name: str, n_stages: int) -> str:
    m = _STAGE_RE.search(name)
    if m:
        idx = int(m.group(1))
        if idx == n_stages - 1:
            return "backbone_last"
        if idx == 0:
            return "backbone_early"
        return "backbone_mid"
    tail = name.split(".", 1)[1]
    if tail.startswith(("stem", "patch_embed", "embed_norm")):
        return "backbone_early"
    if tail.startswith(("head_norm", "final_norm", "se.")):
        return "backbone_last"
    raise ConfigError(f"cannot assign a schedule group to {name!r}")


def build_registry(model: Detector) -> ParamRegistry:
    n_stages = {
        "rgb_back": len(model.cfg.rgb.depths),
        "tex_back": len(model.cfg.tex.depths),
        "freq_back": len(model.cfg.freq.channels),
    }
    entries = []
    for name, p, no_decay in model.named_parameters():
        root = name.split(".", 1)[0]
        if root in n_stages:
            group = _backbone_group(name, n_stages[root])
        elif root.endswith("_proj"):
            group = "projection"
        elif root.endswith("_pool") or root == "fusion":
            group = "head"
        elif root == "classifier":
            group = "classifier"
        else:
            raise ConfigError(f"cannot assign a schedule group to {name!r}")
        entries.append(ParamEntry(name, p, group, no_decay))
    return ParamRegistry(entries)


_PART_RE = re.compile(r"^(\w+)((?:\[-?\d+\])*)$")


def resolve_layer(model: Module, path: str):
    """Walk a dotted path with optional [index] steps, e.g.
    "rgb_back.stages[-1].blocks[-1].depthwise_conv"."""
    obj = model
    for part in path.split("."):
        m = _PART_RE.match(part)
        if not m:
            raise ConfigError(f"malformed path component {part!r} in {path!r}")
        try:
            obj = getattr(obj, m.group(1))
        except AttributeError:
            raise ConfigError(f"{path!r}: no attribute {m.group(1)!r} on "
                              f"{type(obj).__name__}") from None
        for idx in re.findall(r"\[(-?\d+)\]", m.group(2)):
            try:
                obj = obj[int(idx)]
            except (IndexError, TypeError):
                raise ConfigError(f"{path!r}: bad index [{idx}]") from None
    return obj


def reseed_dropout(model: Module, seed: int) -> None:
    """Deterministically reseed every dropout layer from one master seed."""
    for path, m in model.modules():
        if isinstance(m, Dropout):
            m.rng = np.random.default_rng(derive_seed(seed, path or "root"))
