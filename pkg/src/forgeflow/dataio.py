"""Segment files, manifests, normalization, frequency maps and the seeded
synthetic forgery generator.

Segment file layout (little-endian): magic "FFSG", version u32, then K, C,
H, W as u16, then K*C*H*W float32 pixels in [0, 1].

The generator builds "real" segments as a subject-like composite: a per
identity base tone, a Gaussian blob face proxy with per-frame positional
jitter, a smooth low-frequency field, and white noise whose strength varies
per segment. A "fake" is a real composite plus exactly one artifact family:

* texture  - a small pasted high-frequency patch with a hard boundary; its
             bounding box is recorded for localization experiments,
* frequency - a global low-amplitude sinusoid at an integer cycle count, so
             its spectral signature is a single bin pair while the spatial
             amplitude stays at the noise floor,
* color    - a global channel shift that sums to zero across channels, so
             the grayscale image (and with it the frequency map) is
             untouched.

Every segment derives its own generator from the master seed, so one config
reproduces bit-identical files. Identities never straddle the train/val
split; the manifest reader enforces that again on load.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .fft import magnitude_spectrum
from .prng import derive_index_seed, derive_seed

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SEGMENT_MAGIC = b"FFSG"
SEGMENT_VERSION = 1
_HEADER = struct.Struct("<4sIHHHH")

ARTIFACT_KINDS = ("none", "texture", "frequency", "color")


def write_segment(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise DataError(f"segment must be [K,C,H,W], got {frames.shape}")
    K, C, H, W = frames.shape
    if K < 1:
        raise DataError("segment needs at least one frame")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise DataError("segment pixels must lie in [0, 1]")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SEGMENT_MAGIC, SEGMENT_VERSION, K, C, H, W))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_segment(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, K, C, H, W = _HEADER.unpack(head)
        if magic != SEGMENT_MAGIC:
            raise FormatError(f"{path}: not a segment file (bad magic)")
        if version != SEGMENT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    expected = K * C * H * W * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header "
                          f"implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(K, C, H, W).copy()


def normalize(frames: np.ndarray) -> np.ndarray:
    """Standard per-channel normalization of [...,3,H,W] pixels in [0,1]."""
    frames = np.asarray(frames, dtype=np.float32)
    return (frames - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def denormalize(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float32)
    return frames * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]


def make_freq_map(frame: np.ndarray) -> np.ndarray:
    """[3,H,W] raw pixels -> [1,H,W] min-max-normalized log spectrum."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise DataError(f"expected [3,H,W] frame, got {frame.shape}")
    gray = frame.mean(axis=0)
    mag = magnitude_spectrum(gray)
    span = mag.max() - mag.min()
    if span == 0.0:
        return np.zeros((1,) + gray.shape, dtype=np.float32)
    return ((mag - mag.min()) / span)[None].astype(np.float32)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str
    identity: str
    artifact_kind: str = "none"
    bbox: tuple | None = None

    @property
    def segment_id(self) -> str:
        return os.path.splitext(os.path.basename(self.path))[0]


def write_manifest(path, entries) -> None:
    _validate_entries(entries, str(path))
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({
                "path": e.path, "label": e.label, "split": e.split,
                "identity": e.identity,
                "artifact": {"kind": e.artifact_kind,
                             "bbox": list(e.bbox) if e.bbox else None},
            }) + "\n")


def _validate_entries(entries, where):
    split_identities: dict = {}
    for e in entries:
        if e.label not in (0, 1):
            raise DataError(f"{where}: label must be 0/1, got {e.label!r}")
        if e.split not in ("train", "val"):
            raise DataError(f"{where}: unknown split {e.split!r}")
        if e.artifact_kind not in ARTIFACT_KINDS:
            raise DataError(f"{where}: unknown artifact kind "
                            f"{e.artifact_kind!r}")
        split_identities.setdefault(e.split, set()).add(e.identity)
    leaked = (split_identities.get("train", set())
              & split_identities.get("val", set()))
    if leaked:
        raise DataError(f"{where}: identities appear in both splits: "
                        f"{sorted(leaked)[:5]}")


def read_manifest(path) -> list:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                art = obj.get("artifact") or {}
                bbox = art.get("bbox")
                entries.append(ManifestEntry(
                    path=str(obj["path"]), label=int(obj["label"]),
                    split=str(obj["split"]), identity=str(obj["identity"]),
                    artifact_kind=str(art.get("kind", "none")),
                    bbox=tuple(bbox) if bbox else None))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed manifest "
                                  f"line") from None
    _validate_entries(entries, path)
    return entries


@dataclass
class SynthConfig:
    n_fake_train: int = 245
    n_real_train: int = 35
    n_fake_val: int = 70
    n_real_val: int = 10
    side: int = 32
    k_frames: int = 4
    master_seed: int = 0
    mix: dict = field(default_factory=lambda: {
        "texture": 1 / 3, "frequency": 1 / 3, "color": 1 / 3})
    identities_train: int = 20
    identities_val: int = 6
    noise_sigma: tuple = (0.01, 0.035)
    grain_ratio: tuple = (1.2, 3.0)     # face grain amplitude, in noise sigmas
    texture_patch: tuple = (12, 16)     # side length range of the pasted patch
    texture_amp: float = 0.12           # chroma roughness amplitude of the patch
    texture_delta: float = 0.22         # constant chroma offset of the patch
    freq_amp: float = 0.02
    freq_band: tuple = (10, 15)         # integer cycles per image
    color_shift: float = 0.1

    def __post_init__(self):
        if self.side < 8 or self.side & (self.side - 1):
            raise ConfigError(f"image side must be a power of two >= 8, "
                              f"got {self.side}")
        if self.k_frames < 1:
            raise ConfigError("k_frames must be >= 1")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"artifact mix must sum to 1, got {self.mix}")
        if set(self.mix) - {"texture", "frequency", "color"}:
            raise ConfigError(f"unknown artifact families in mix: {self.mix}")
        lo, hi = self.freq_band
        if not 1 <= lo <= hi <= self.side // 2 - 1:
            raise ConfigError(f"freq_band {self.freq_band} does not fit below "
                              f"the Nyquist limit for side {self.side}")


def _smooth_field(rng, side, cells=4):
    """Bilinear interpolation of a coarse Gaussian grid; unit-scale output."""
    g = rng.normal(size=(cells + 1, cells + 1))
    t = np.linspace(0.0, cells, side, endpoint=False)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows0 = g[i0]
    rows1 = g[i0 + 1]
    top = rows0[:, i0] * (1 - f)[None, :] + rows0[:, i0 + 1] * f[None, :]
    bot = rows1[:, i0] * (1 - f)[None, :] + rows1[:, i0 + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


@dataclass
class _Identity:
    face: np.ndarray      # base face color, 3
    background: np.ndarray
    center: tuple
    radius: float


def _make_identity(seed, side):
    rng = np.random.default_rng(seed)
    face = np.array([0.56, 0.46, 0.38]) + rng.uniform(-0.06, 0.06, size=3)
    background = np.array([0.36, 0.38, 0.44]) + rng.uniform(-0.08, 0.08, size=3)
    center = (side / 2 + rng.uniform(-4, 4), side / 2 + rng.uniform(-4, 4))
    radius = rng.uniform(side / 8, side / 5)
    return _Identity(face, background, center, radius)


def _real_frames(rng, ident, cfg):
    """Identity composite: blob + low-frequency field + face grain + noise.

    Every segment, real or fake, carries a localized broadband component
    (the face grain) and a per-frame sensor noise floor.  Real segments
    therefore already span the kinds of second-order statistics that the
    artifact families perturb, which keeps each family visible to exactly
    the branch that is built for it rather than to all of them at once.
    """
    side, K = cfg.side, cfg.k_frames
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    lf = _smooth_field(rng, side) * 0.05
    chan_w = rng.uniform(0.7, 1.3, size=3)
    sigmas = rng.uniform(*cfg.noise_sigma, size=K)
    grain_ratio = rng.uniform(*cfg.grain_ratio)
    # grain is luminance-only: broadband structure lives in the grayscale
    # plane, leaving structured chroma as the texture family's territory
    grain = rng.uniform(-1.0, 1.0, size=(side, side))
    taper = np.exp(-(((yy - ident.center[0]) ** 2
                      + (xx - ident.center[1]) ** 2)
                     / (2.0 * (1.15 * ident.radius) ** 2)))
    frames = np.empty((K, 3, side, side))
    for k in range(K):
        cy = ident.center[0] + rng.uniform(-1.0, 1.0)
        cx = ident.center[1] + rng.uniform(-1.0, 1.0)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2)
                        / (2.0 * ident.radius ** 2)))
        amp = np.sqrt(3.0) * grain_ratio * sigmas[k]
        for c in range(3):
            frames[k, c] = (ident.background[c]
                            + (ident.face[c] - ident.background[c]) * blob
                            + lf * chan_w[c]
                            + grain * taper * amp
                            + rng.normal(size=(side, side)) * sigmas[k])
    return np.clip(frames, 0.0, 1.0), sigmas


# All texture pastes share one chroma axis, the way a single splicing
# tool leaves a single color fingerprint.  The axis is zero-sum across
# channels, so the grayscale mean, and with it the magnitude spectrum,
# cannot see the paste at all (the same trick the color family uses,
# made local and high-frequency).
_TEXTURE_AXIS = np.array([1.0, -0.5, -0.5])


def _apply_texture(frames, rng, cfg, sigmas):
    # The paste combines a constant chroma offset (the sharply bounded
    # splice, a consistent cue that survives global average pooling) with
    # 2x2-block chroma roughness (the alien high-frequency content).
    side = cfg.side
    size = int(rng.integers(cfg.texture_patch[0], cfg.texture_patch[1] + 1))
    x = int(rng.integers(0, side - size + 1))
    y = int(rng.integers(0, side - size + 1))
    half = (size + 1) // 2
    blocks = rng.uniform(-1.0, 1.0, size=(half, half))
    pattern = blocks.repeat(2, axis=0).repeat(2, axis=1)[:size, :size]
    pattern -= pattern.mean()
    chroma = pattern * cfg.texture_amp + cfg.texture_delta
    frames[:, :, y:y + size, x:x + size] += (
        chroma[None] * _TEXTURE_AXIS[:, None, None])[None]
    return (x, y, size, size)


def _apply_frequency(frames, rng, cfg, sigmas):
    # High-cycle band: two to three pixels per period, which a 4x4
    # averaging stem flattens, keeping the wave a spectrum-only artifact.
    side = cfg.side
    lo, hi = cfg.freq_band
    while True:
        cx = int(rng.integers(-hi, hi + 1))
        cy = int(rng.integers(-hi, hi + 1))
        if max(abs(cx), abs(cy)) >= lo and max(abs(cx), abs(cy)) <= hi:
            break
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    wave = cfg.freq_amp * np.sin(2.0 * np.pi * (cx * xx / side
                                                + cy * yy / side) + phase)
    frames += wave
    return None


def _apply_color(frames, rng, cfg, sigmas):
    # Flickering global channel shift: the zero-sum triplet keeps the
    # grayscale mean, and with it the frequency map, untouched, and the
    # per-frame sign alternation makes the shift cancel under any linear
    # average over frames; what remains is a temporal color
    # inconsistency that only a nonlinear per-frame encoder can rectify
    # into a detection.
    shifts = np.array([cfg.color_shift, 0.0, -cfg.color_shift])
    rng.shuffle(shifts)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    for k in range(frames.shape[0]):
        frames[k] += sign * shifts[:, None, None]
        sign = -sign
    return None


_ARTIFACTS = {"texture": _apply_texture, "frequency": _apply_frequency,
              "color": _apply_color}


def _family_plan(n_fake, mix, rng):
    """Exact per-family counts by largest remainder, then shuffled."""
    families = sorted(mix)
    quotas = {f: mix[f] * n_fake for f in families}
    counts = {f: int(quotas[f]) for f in families}
    rest = n_fake - sum(counts.values())
    for f in sorted(families, key=lambda f: quotas[f] - counts[f],
                    reverse=True)[:rest]:
        counts[f] += 1
    plan = [f for f in families for _ in range(counts[f])]
    rng.shuffle(plan)
    return plan


def synth_generate(cfg: SynthConfig, out_dir) -> list:
    """Write segment files plus manifest.jsonl; returns the manifest entries."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: "
                        f"{exc}") from exc
    if not os.path.isdir(out_dir) or not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory {out_dir} is not writable")
    entries = []
    for split, n_fake, n_real, n_ident in (
            ("train", cfg.n_fake_train, cfg.n_real_train, cfg.identities_train),
            ("val", cfg.n_fake_val, cfg.n_real_val, cfg.identities_val)):
        split_seed = derive_seed(cfg.master_seed, f"split-{split}")
        idents = [_make_identity(derive_seed(split_seed, f"identity-{i}"),
                                 cfg.side) for i in range(n_ident)]
        plan_rng = np.random.default_rng(derive_seed(split_seed, "family-plan"))
        plan = _family_plan(n_fake, cfg.mix, plan_rng)
        for index in range(n_fake + n_real):
            rng = np.random.default_rng(derive_index_seed(split_seed, index))
            ident_idx = int(rng.integers(0, n_ident))
            frames, sigmas = _real_frames(rng, idents[ident_idx], cfg)
            if index < n_fake:
                family = plan[index]
                bbox = _ARTIFACTS[family](frames, rng, cfg, sigmas)
                frames = np.clip(frames, 0.0, 1.0)
                label = 1
            else:
                family, bbox, label = "none", None, 0
            name = f"{split}_{index:04d}_{'fake' if label else 'real'}.ffsg"
            write_segment(os.path.join(out_dir, name), frames)
            entries.append(ManifestEntry(
                path=name, label=label, split=split,
                identity=f"{split}-subject-{ident_idx:03d}",
                artifact_kind=family, bbox=bbox))
    _validate_entries(entries, out_dir)
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), entries)
    return entries


def summarize_manifest(entries) -> dict:
    out: dict = {}
    for e in entries:
        s = out.setdefault(e.split, {"fake": 0, "real": 0, "families": {}})
        s["fake" if e.label else "real"] += 1
        if e.artifact_kind != "none":
            s["families"][e.artifact_kind] = \
                s["families"].get(e.artifact_kind, 0) + 1
    return out


class Segment(NamedTuple):
    segment_id: str
    frames: np.ndarray     # [K,3,H,W] normalized
    freq_maps: np.ndarray  # [K,1,H,W] in [0,1]
    label: int


def load_segment_arrays(path):
    """Raw pixels -> (normalized frames, per-frame freq maps)."""
    raw = read_segment(path)
    maps = np.stack([make_freq_map(f) for f in raw])
    return normalize(raw), maps


def load_dataset(manifest_path, split, shuffle_seed=None) -> list:
    """Materialize one split as a list of Segment tuples, manifest order
    (or a seeded permutation of it)."""
    entries = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        raise DataError(f"{manifest_path}: split {split!r} is empty")
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(chosen))
        chosen = [chosen[i] for i in order]
    out = []
    for e in chosen:
        full = e.path if os.path.isabs(e.path) else os.path.join(base, e.path)
        if not os.path.exists(full):
            raise DataError(f"{manifest_path}: segment file missing: {e.path}")
        frames, maps = load_segment_arrays(full)
        out.append(Segment(e.segment_id, frames, maps, e.label))
    return out
