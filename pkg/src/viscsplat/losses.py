"""Photometric loss and the two particle-constraint penalties.

The constraint terms take only the visible Gaussians' attributes; callers
scatter the returned gradients back into the full scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import UsageError, activate_opacity, activate_scale

CONFIDENCE_FACTOR = 1.99


@dataclass(frozen=True)
class LossReport:
    photometric: float
    scale_term: float
    confidence_term: float
    omega_s: float
    omega_t: float

    @property
    def total(self) -> float:
        return self.photometric + self.omega_s * self.scale_term + self.omega_t * self.confidence_term


def photometric_l2(rendered, target):
    """Mean squared error over pixels and channels, with dL/dC per pixel."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise UsageError("image shapes differ: %s vs %s" % (rendered.shape, target.shape))
    diff = rendered - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def scale_loss(log_scales, beta):
    """Mean hinge max(s* - beta, 0) on each Gaussian's largest activated scale.

    The subgradient only reaches the argmax log-scale component, where
    d s*/d log_s = s*.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    grad = np.zeros_like(log_scales)
    if len(log_scales) == 0:
        return 0.0, grad
    scales = activate_scale(log_scales)
    j = np.argmax(scales, axis=1)
    s_max = scales[np.arange(len(scales)), j]
    excess = s_max - beta
    value = float(np.mean(np.maximum(excess, 0.0)))
    active = excess > 0
    grad[np.arange(len(scales))[active], j[active]] = s_max[active] / len(scales)
    return value, grad


def confidence_loss(opacity_logits):
    """Mean (o - floor(1.99 o))^2 over activated opacities.

    The floor acts as a constant bin label b, so d/d(logit) = 2 (o - b) o (1 - o).
    """
    logits = np.asarray(opacity_logits, dtype=np.float64)
    if len(logits) == 0:
        return 0.0, np.zeros(0)
    o = activate_opacity(logits)
    b = np.floor(CONFIDENCE_FACTOR * o)
    r = o - b
    value = float(np.mean(r * r))
    grad = 2.0 * r * o * (1.0 - o) / len(o)
    return value, grad
