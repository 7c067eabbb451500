"""Activation-map generation and the scaled map-alignment loss.

The teacher map weights final-stage feature channels by the spatial mean of
the class-score gradient and clamps the weighted sum at zero; it is always
detached (teacher knowledge is frozen). The student map is the plain spike
count per pixel, summed over time and channels, and stays on the autodiff
graph so alignment gradients reach the spiking layers through the surrogate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import StudentNet, TeacherNet
from .spiking import SpikeTrain
from .tensor import Tensor

SCALE_MODES = ("softmax", "l2", "zscore", "none")


@dataclass
class ActivationMap:
    values: Tensor  # [N, h, w], non-negative
    source: str  # "teacher_cam" or "student_sam"


@dataclass
class ScaledMap:
    probs: Tensor  # [N, h, w]; a per-sample distribution only in softmax mode
    mode: str
    temperature: float | None = None
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def cam_generate(features, target_logit_grad) -> ActivationMap:
    """Channel-weighted teacher map: ReLU(sum_c mean_ij(dy/dF_c) * F_c), detached."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    grads = target_logit_grad.data if isinstance(target_logit_grad, Tensor) else np.asarray(target_logit_grad)
    if feats.shape != grads.shape:
        raise ValueError(f"cam_generate: features {feats.shape} vs gradients {grads.shape}")
    if feats.ndim != 4:
        raise ValueError(f"cam_generate: expected [N,C,h,w], got {feats.shape}")
    alpha = grads.mean(axis=(2, 3))  # [N, C]
    weighted = np.einsum("nc,nchw->nhw", alpha, feats)
    return ActivationMap(Tensor(np.maximum(weighted, 0.0)), "teacher_cam")


def teacher_cam(teacher: TeacherNet, x: Tensor, labels, target: str = "logit",
                tap_stage: int = 4) -> ActivationMap:
    """Run a scoped teacher backward to get per-sample maps for the true class.

    ``target`` picks the scalar whose feature gradient weights the channels:
    "logit" (raw class score, the conventional choice) or "loss"
    (cross-entropy against the label). Teacher parameter gradients are
    cleared before returning; only the map leaves this function.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logits, features = teacher.forward(x, tap_stage=tap_stage)
    if target == "logit":
        scalar = T.tsum(T.gather_rows(logits, labels))
    elif target == "loss":
        scalar = T.cross_entropy(logits, labels)
    else:
        raise ValueError(f"unknown cam target {target!r}")
    scalar.backward()
    grad = features.grad
    amap = cam_generate(features.detach(), grad)
    teacher.zero_grad()
    return amap


def sam_generate(spikes: SpikeTrain) -> ActivationMap:
    """Per-pixel spike count over time and channels; differentiable."""
    values = spikes.spikes.data
    if not np.all((values == 0) | (values == 1)):
        raise ValueError("sam_generate: spike train is not binary")
    if spikes.spikes.ndim != 5:
        raise ValueError(f"sam_generate: expected [T,N,C,h,w], got {spikes.spikes.shape}")
    return ActivationMap(T.tsum(spikes.spikes, axis=(0, 2)), "student_sam")


def student_grad_cam(student: StudentNet, x: Tensor, labels, time_steps: int) -> ActivationMap:
    """Gradient-weighted map on the student, via the surrogate backward path.

    Provided for side-by-side inspection against the spike-count map; the
    surrogate makes these gradients approximate, so no alignment is built
    on top of this generator.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logits, train = student.forward(x, time_steps)
    T.tsum(T.gather_rows(logits, labels)).backward()
    grad = train.spikes.grad  # [T,N,C,h,w]
    if grad is None:
        grad = np.zeros_like(train.spikes.data)
    alpha = grad.mean(axis=(3, 4))  # [T,N,C]
    weighted = np.einsum("tnc,tnchw->nhw", alpha, train.spikes.data)
    student.zero_grad()
    return ActivationMap(Tensor(np.maximum(weighted, 0.0)), "student_sam")


def _flatten_maps(amap: ActivationMap) -> Tensor:
    n, h, w = amap.values.shape
    return T.reshape(amap.values, (n, h * w))


def saliency_scale(amap: ActivationMap, mode: str, temperature: float = 2.0) -> ScaledMap:
    """Map raw saliency onto a common scale.

    softmax: per-sample temperature softmax over pixels (a probability
    distribution). l2: divide by the spatial L2 norm. zscore: standardize
    to zero mean, unit variance. none: pass through. Zero maps under l2
    and constant maps under zscore are replaced by the uniform/zero result
    and flagged via ``degenerate``.
    """
    n, h, w = amap.values.shape
    shape = (n, h, w)
    degenerate = np.zeros(n, dtype=bool)
    if mode == "softmax":
        if temperature <= 0:
            raise ValueError("softmax scaling requires a positive temperature")
        flat = _flatten_maps(amap)
        probs = T.reshape(T.softmax(flat, axis=1, temperature=temperature), shape)
        return ScaledMap(probs, mode, temperature, degenerate)
    if mode == "l2":
        flat = amap.values.data.reshape(n, -1)
        norms = np.sqrt((flat * flat).sum(axis=1))
        degenerate = norms == 0.0
        if degenerate.any():
            out = flat / np.where(norms == 0.0, 1.0, norms)[:, None]
            out[degenerate] = 1.0 / np.sqrt(h * w)  # uniform map with unit L2 norm
            return ScaledMap(Tensor(out.reshape(shape)), mode, None, degenerate)
        safe = Tensor(norms[:, None].astype(amap.values.dtype))
        scaled = T.div(_flatten_maps(amap), _tile_cols(safe, h * w))
        return ScaledMap(T.reshape(scaled, shape), mode, None, degenerate)
    if mode == "zscore":
        flat = amap.values.data.reshape(n, -1)
        mean = flat.mean(axis=1, keepdims=True)
        std = flat.std(axis=1, keepdims=True)
        degenerate = std[:, 0] == 0.0
        out = (flat - mean) / np.where(std == 0.0, 1.0, std)
        return ScaledMap(Tensor(out.reshape(shape)), mode, None, degenerate)
    if mode == "none":
        return ScaledMap(amap.values, mode, None, degenerate)
    raise ValueError(f"unknown scale mode {mode!r}; expected one of {SCALE_MODES}")


def bilinear_resize(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [N,h,w] maps with bilinear sampling (pixel-center alignment)."""
    n, h, w = maps.shape
    if (h, w) == (out_h, out_w):
        return maps
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = maps[:, y0][:, :, x0] * (1 - wx) + maps[:, y0][:, :, x1] * wx
    bot = maps[:, y1][:, :, x0] * (1 - wx) + maps[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(maps.dtype)


def samd_loss(teacher_map: ActivationMap, student_map: ActivationMap, temperature: float) -> Tensor:
    """Squared-temperature KL between softmax-scaled maps, averaged over the batch.

    The teacher side is treated as a constant; gradients flow only into the
    student map. Teacher maps on a different grid are resized to the
    student's before scaling.
    """
    te = teacher_map.values.data
    st = student_map.values
    if te.shape[0] != st.shape[0]:
        raise ValueError(f"samd_loss: batch mismatch {te.shape} vs {st.shape}")
    if te.shape[1:] != tuple(st.shape[1:]):
        te = bilinear_resize(te, st.shape[1], st.shape[2])
    n = st.shape[0]
    p_te = saliency_scale(ActivationMap(Tensor(te), "teacher_cam"), "softmax", temperature).probs
    p_st = saliency_scale(student_map, "softmax", temperature).probs
    kl = T.kl_div(p_te.detach(), p_st)
    return T.mul(kl, temperature * temperature / n)


def scaled_map_alignment(teacher_map: ActivationMap, student_map: ActivationMap,
                         mode: str, temperature: float) -> Tensor:
    """Alignment loss under any scaling mode.

    softmax keeps the KL form; the non-distribution modes (l2 / zscore /
    none) fall back to the mean squared difference of the scaled maps,
    since KL is undefined for maps that are not probability vectors.
    """
    if mode == "softmax":
        return samd_loss(teacher_map, student_map, temperature)
    te = teacher_map.values.data
    st = student_map.values
    if te.shape[1:] != tuple(st.shape[1:]):
        te = bilinear_resize(te, st.shape[1], st.shape[2])
    scaled_te = saliency_scale(ActivationMap(Tensor(te), "teacher_cam"), mode).probs.data
    if mode == "none":
        scaled_st = st
    elif mode == "l2":
        n, width = st.shape[0], st.shape[1] * st.shape[2]
        flat = st.data.reshape(n, -1)
        norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
        norms = np.where(norms == 0.0, 1.0, norms).astype(st.dtype)
        scaled_st = T.div(T.reshape(st, (n, width)), Tensor(np.broadcast_to(norms, (n, width)).copy()))
    else:  # zscore
        flat = T.reshape(st, (st.shape[0], -1))
        width = flat.shape[1]
        mean = T.tmean(flat, axis=1, keepdims=True)
        centered = T.sub(flat, _tile_cols(mean, width))
        std = st.data.reshape(st.shape[0], -1).std(axis=1, keepdims=True)
        std = np.where(std == 0.0, 1.0, std).astype(st.dtype)
        scaled_st = T.div(centered, Tensor(np.broadcast_to(std, (st.shape[0], width)).copy()))
    target = Tensor(np.asarray(scaled_te, dtype=st.dtype).reshape(scaled_st.shape))
    diff = T.sub(scaled_st, target)
    return T.tmean(T.mul(diff, diff))


def _tile_cols(col: Tensor, width: int) -> Tensor:
    """Tile an [N,1] tensor to [N,width] (ops only broadcast scalars)."""
    ones = Tensor(np.ones((1, width), dtype=col.dtype))
    return T.matmul(col, ones)


# ----- export -----

def export_pgm(map_values: np.ndarray, path) -> None:
    """Write one [h,w] map as binary PGM (P5), min-max normalized to 0..255."""
    arr = np.asarray(map_values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"export_pgm expects a single [h,w] map, got {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def export_csv(map_values: np.ndarray, path) -> None:
    """Write raw map values, one CSV row per spatial row."""
    arr = np.asarray(map_values)
    if arr.ndim != 2:
        raise ValueError(f"export_csv expects a single [h,w] map, got {arr.shape}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in arr:
            writer.writerow([repr(float(v)) for v in row])
