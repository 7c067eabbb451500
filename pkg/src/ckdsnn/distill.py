"""Logits distillation with statistics-matched Gaussian smoothing, plus the total objective.

Student logits are perturbed (training only) by noise drawn per sample from
a Gaussian whose mean and standard deviation match that sample's own logits,
then aligned with the teacher's logits through a temperature KL loss. The
noise is a constant in the backward pass: gradients flow only through the
raw student logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NOISE_MODES = ("adaptive", "fixed", "none")


@dataclass(frozen=True)
class NoiseConfig:
    mode: str = "adaptive"
    std: float = 0.0  # only read in fixed mode
    lam: float = 0.1  # mixing weight for the noise term

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}; expected one of {NOISE_MODES}")
        if self.mode == "fixed" and self.std < 0:
            raise ValueError(f"fixed noise std must be >= 0, got {self.std}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    @classmethod
    def parse(cls, spec: str, lam: float = 0.1) -> "NoiseConfig":
        """Parse 'adaptive', 'none', or 'fixed:<std>'."""
        if spec.startswith("fixed:"):
            return cls("fixed", float(spec.split(":", 1)[1]), lam)
        if spec == "fixed":
            raise ValueError("fixed noise needs a std, e.g. fixed:0.1")
        return cls(spec, 0.0, lam)

    def label(self) -> str:
        return f"fixed:{self.std:g}" if self.mode == "fixed" else self.mode


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0  # map-alignment weight
    gamma: float = 1.0  # logits-alignment weight
    tau: float = 2.0  # logits temperature
    temp_map: float = 2.0  # saliency temperature

    def __post_init__(self):
        if self.tau <= 0 or self.temp_map <= 0:
            raise ValueError("temperatures must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


def sample_adaptive_noise(z, rng: np.random.Generator) -> np.ndarray:
    """Per-sample N(mean, std^2) noise matched to each row of z[N,K].

    Uses the population standard deviation over the K classes by default;
    pass ddof through ``sample_noise`` for the sample-std variant.
    """
    return _statistics_matched_noise(z, rng, ddof=0)


def _statistics_matched_noise(z, rng: np.random.Generator, ddof: int) -> np.ndarray:
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"expected logits [N,K] with K >= 2, got {data.shape}")
    mean = data.mean(axis=1, keepdims=True)
    std = data.std(axis=1, keepdims=True, ddof=ddof)
    eps = rng.standard_normal(data.shape)
    return (mean + std * eps).astype(data.dtype)


def sample_noise(z, config: NoiseConfig, rng: np.random.Generator, ddof: int = 0) -> np.ndarray | None:
    """Draw the configured noise for one training step; None when disabled."""
    if config.mode == "none":
        return None
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    if config.mode == "adaptive":
        return _statistics_matched_noise(z, rng, ddof)
    return (config.std * rng.standard_normal(data.shape)).astype(data.dtype)


def smooth_logits(z: Tensor, noise: np.ndarray | None, lam: float) -> Tensor:
    """z + lam * noise, with the noise held constant under backward."""
    if noise is None or lam == 0.0:
        return z
    noise = np.asarray(noise)
    if noise.shape != z.shape:
        raise ValueError(f"noise shape {noise.shape} does not match logits {z.shape}")
    return T.add(z, Tensor((lam * noise).astype(z.dtype)))


def nld_loss(teacher_logits, student_soft_logits: Tensor, tau: float) -> Tensor:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student_soft/tau)), batch mean."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    te = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if te.shape != tuple(student_soft_logits.shape):
        raise ValueError(f"nld_loss: shape mismatch {te.shape} vs {student_soft_logits.shape}")
    n = te.shape[0]
    y_te = T.softmax(Tensor(te), axis=1, temperature=tau)
    y_soft = T.softmax(student_soft_logits, axis=1, temperature=tau)
    return T.mul(T.kl_div(y_te, y_soft), tau * tau / n)


def total_loss(ce: Tensor, samd: Tensor, nld: Tensor, weights: LossWeights) -> Tensor:
    """ce + beta * samd + gamma * nld, rejecting non-finite components by name."""
    for name, term in (("ce", ce), ("samd", samd), ("nld", nld)):
        value = term.data if isinstance(term, Tensor) else term
        if not np.isfinite(value).all():
            raise FloatingPointError(f"non-finite {name} loss component")
    samd = samd if isinstance(samd, Tensor) else Tensor(np.float32(samd))
    nld = nld if isinstance(nld, Tensor) else Tensor(np.float32(nld))
    return T.add(T.add(ce, T.mul(samd, weights.beta)), T.mul(nld, weights.gamma))
