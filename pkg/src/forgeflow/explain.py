"""Grad-CAM over a chosen convolution plus colormap overlay output.

The class-activation map follows the usual recipe: capture the target
layer's activation A[c,h,w] and the gradient G[c,h,w] of the class score,
weight each channel by the spatial mean of its gradient, ReLU the weighted
sum, min-max normalize, then bilinear-upsample (half-pixel centers) to the
frame size. For the binary sigmoid head the "class score" is the pre-sigmoid
logit, sign-flipped when the predicted class is "real", so the gradient
always points toward the predicted class.

JET colormap, piecewise linear with breakpoints at t = 0, 1/3, 2/3, 1:

    t=0 -> (0,0,1) blue, t=1/3 -> (0,1,1) cyan,
    t=2/3 -> (1,1,0) yellow, t=1 -> (1,0,0) red

Overlays are written as binary PPM (P6, maxval 255), one file per frame,
named <segment_id>_f<frame_idx>_cam.ppm.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .model import BranchMask, resolve_layer
from .tensor import GradientTape, Tensor


@dataclass
class GradCamConfig:
    target_layer: str = "rgb_back.stages[-1].blocks[-1].depthwise_conv"
    overlay_alpha: float = 0.5
    mask: BranchMask = field(default_factory=BranchMask)

    def __post_init__(self):
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ConfigError(f"overlay_alpha must be in [0,1], got "
                              f"{self.overlay_alpha}")


@dataclass
class Heatmap:
    values: np.ndarray          # [H,W] in [0,1], upsampled
    source_shape: tuple         # activation dims the map came from (C,h,w)
    all_zero: bool = False      # raw map had no positive response
    predicted_fake: bool = True
    prob: float = 0.5


def bilinear_upsample(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of a [H,W] map (edge clamped)."""
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2:
        raise ShapeError(f"expected [H,W] map, got {src.shape}")
    H, W = src.shape
    sy = (np.arange(out_h) + 0.5) * H / out_h - 0.5
    sx = (np.arange(out_w) + 0.5) * W / out_w - 0.5
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    dy = (sy - y0)[:, None]
    dx = (sx - x0)[None, :]
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    return (src[np.ix_(y0c, x0c)] * (1 - dy) * (1 - dx)
            + src[np.ix_(y0c, x1c)] * (1 - dy) * dx
            + src[np.ix_(y1c, x0c)] * dy * (1 - dx)
            + src[np.ix_(y1c, x1c)] * dy * dx)


def _normalize_map(raw: np.ndarray):
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= lo:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def cam_map(act: np.ndarray, grad: np.ndarray):
    """Core weighting step on one frame's captured arrays.

    act, grad: [C,h,w]. Channel weights are the spatial means of the
    gradient; the weighted sum is rectified then min-max normalized.
    Returns ([h,w] map, all_zero flag)."""
    if act.shape != grad.shape or act.ndim != 3:
        raise ShapeError(f"activation {act.shape} vs gradient {grad.shape}")
    weights = grad.mean(axis=(1, 2))
    raw = np.maximum((weights[:, None, None] * act).sum(axis=0), 0.0)
    return _normalize_map(raw)


def segment_cams(model, frames, freq_maps, cfg: GradCamConfig | None = None):
    """Per-frame heatmaps for one segment, all from a single forward and
    backward pass. frames: [K,3,H,W] normalized, freq_maps: [K,1,H,W].
    Returns (list of Heatmap, segment probability)."""
    cfg = cfg or GradCamConfig()
    frames = np.asarray(frames)
    freq_maps = np.asarray(freq_maps)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected [K,3,H,W] frames, got {frames.shape}")
    K, _, H, W = frames.shape
    layer = resolve_layer(model, cfg.target_layer)
    if not hasattr(layer, "capture"):
        raise ConfigError(f"target layer {cfg.target_layer!r} is not a "
                          f"convolution and cannot be captured")
    model.eval()
    layer.capture = True
    try:
        with GradientTape() as tape:
            out = model.forward_segment(frames[None], freq_maps[None],
                                        cfg.mask)
            prob = float(out.prob.data[0])
            predicted_fake = prob >= 0.5
            # gradient of the predicted-class score: the raw logit for
            # "fake", its negation for "real"
            target = out.logit if predicted_fake else T.neg(out.logit)
        act = layer.last_activation
        if act is None:
            raise UsageError(f"target layer {cfg.target_layer!r} saw no "
                             f"activation; is its branch masked off?")
        if act.ndim != 4:
            raise ConfigError(f"target layer {cfg.target_layer!r} produced a "
                              f"{act.ndim}-D activation, need 4-D")
        tape.backward(target)
        grads = act.grad
        if grads is None:
            raise UsageError(f"no gradient reached {cfg.target_layer!r}")
    finally:
        layer.capture = False
        layer.last_activation = None
    acts = act.data.reshape(K, *act.shape[1:])
    grads = grads.reshape(K, *act.shape[1:])
    maps = []
    for k in range(K):
        normed, all_zero = cam_map(acts[k], grads[k])
        maps.append(Heatmap(values=bilinear_upsample(normed, H, W),
                            source_shape=acts[k].shape, all_zero=all_zero,
                            predicted_fake=predicted_fake, prob=prob))
    return maps, prob


def grad_cam(model, frame, freq_map, cfg: GradCamConfig | None = None) -> Heatmap:
    """Heatmap for a single frame treated as a one-frame segment."""
    maps, _ = segment_cams(model, np.asarray(frame)[None],
                           np.asarray(freq_map)[None], cfg)
    return maps[0]


def jet(t: np.ndarray) -> np.ndarray:
    """Piecewise-linear JET: [H,W] in [0,1] -> [3,H,W] RGB in [0,1].

    Breakpoints: 0 blue (0,0,1), 1/3 cyan (0,1,1), 2/3 yellow (1,1,0),
    1 red (1,0,0)."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    third = 1.0 / 3.0
    r = np.clip((t - third) * 3.0, 0.0, 1.0)
    g = np.where(t < third, t * 3.0, np.where(t <= 2 * third, 1.0,
                                              (1.0 - t) * 3.0))
    b = np.clip(1.0 - (t - third) * 3.0, 0.0, 1.0)
    b = np.where(t < third, 1.0, b)
    return np.stack([r, np.clip(g, 0.0, 1.0), b])


def overlay(frame: np.ndarray, heatmap, alpha: float = 0.5) -> np.ndarray:
    """(1-alpha)*frame + alpha*jet(map); frame is [3,H,W] raw pixels."""
    frame = np.asarray(frame, dtype=np.float64)
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    if frame.shape[1:] != values.shape:
        raise ShapeError(f"frame {frame.shape} vs heatmap {values.shape}")
    return (1.0 - alpha) * frame + alpha * jet(values)


def write_ppm(path, image: np.ndarray) -> None:
    """[3,H,W] floats in [0,1] -> binary PPM (P6, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {image.shape}")
    _, H, W = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm, for round-trip checks: returns [3,H,W] uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ShapeError(f"{path}: not a binary PPM")
    W, H = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=H * W * 3)
    return pixels.reshape(H, W, 3).transpose(2, 0, 1)


def emit_segment_cams(model, segment_id, frames, freq_maps, raw_frames,
                      out_dir, cfg: GradCamConfig | None = None) -> list:
    """Write one overlay PPM per frame; returns the written paths.
    raw_frames are the [K,3,H,W] pre-normalization pixels used as the
    overlay base."""
    cfg = cfg or GradCamConfig()
    maps, _ = segment_cams(model, frames, freq_maps, cfg)
    paths = []
    for k, hm in enumerate(maps):
        img = overlay(raw_frames[k], hm, cfg.overlay_alpha)
        path = os.path.join(out_dir, f"{segment_id}_f{k}_cam.ppm")
        write_ppm(path, img)
        paths.append(path)
    return paths


def mass_in_bbox(heatmap, bbox) -> tuple:
    """(heatmap mass fraction inside bbox, bbox area fraction)."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    x, y, w, h = bbox
    H, W = values.shape
    if not (0 <= x and 0 <= y and x + w <= W and y + h <= H):
        raise ShapeError(f"bbox {bbox} outside {H}x{W} map")
    total = float(values.sum())
    if total == 0.0:
        return 0.0, (w * h) / (H * W)
    inside = float(values[y:y + h, x:x + w].sum())
    return inside / total, (w * h) / (H * W)
