"""Feedback-gated ReLU.

A unit with somatic (feedforward) input ``mu_s`` and distal (feedback)
input ``mu_d`` fires at::

    f = max(0, mu_s) / (1 - beta(mu_d))
    beta(mu_d) = min(beta_max / eta * mu_d, beta_max)

``1 / (1 - beta)`` is the gain.  With ``mu_d = 0`` the unit is a plain
ReLU; as feedback grows the slope rises until it saturates at
``1 / (1 - beta_max)`` for ``mu_d >= eta``.  Negative feedback is not
clamped and lowers the gain below one.

The threshold variant adds the feedback to the somatic input before
rectification, weighted by a learned coefficient ``alpha``::

    f = max(0, mu_s + alpha * mu_d) / (1 - beta(mu_d))

All functions accept scalars or equally shaped arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, ParameterError

GainOverride = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class FgReluParams:
    beta_max: float = 0.95
    eta: float = 5.0
    alpha: Optional[float] = None
    gain_override: Optional[GainOverride] = None

    def __post_init__(self):
        if not 0.0 < self.beta_max < 1.0:
            raise ParameterError(f"beta_max must lie in (0, 1), got {self.beta_max}")
        if not self.eta > 0.0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if self.gain_override is not None and not np.isscalar(self.gain_override):
            object.__setattr__(self, "gain_override", tuple(float(g) for g in self.gain_override))

    @property
    def max_gain(self) -> float:
        return 1.0 / (1.0 - self.beta_max)

    @property
    def slope(self) -> float:
        return self.beta_max / self.eta


DEFAULT_PARAMS = FgReluParams()


def beta(mu_d, params: FgReluParams = DEFAULT_PARAMS):
    return np.minimum(params.slope * mu_d, params.beta_max)


def gain(mu_d, params: FgReluParams = DEFAULT_PARAMS):
    return 1.0 / (1.0 - beta(mu_d, params))


def fg_relu(mu_s, mu_d, params: FgReluParams = DEFAULT_PARAMS):
    return np.maximum(0.0, mu_s) / (1.0 - beta(mu_d, params))


def fg_relu_threshold(mu_s, mu_d, params: FgReluParams = DEFAULT_PARAMS, alpha=None):
    """Threshold variant; ``alpha`` defaults to ``params.alpha``."""
    if alpha is None:
        if params.alpha is None:
            raise ParameterError("threshold variant needs alpha")
        alpha = params.alpha
    return np.maximum(0.0, mu_s + alpha * mu_d) / (1.0 - beta(mu_d, params))


def fg_relu_grads(mu_s, mu_d, params: FgReluParams = DEFAULT_PARAMS, alpha=None):
    """Partial derivatives of the gated ReLU.

    Returns ``(df/dmu_s, df/dmu_d)`` for the pure-gain variant, or
    ``(df/dmu_s, df/dmu_d, df/dalpha)`` when ``alpha`` is given (pass
    ``params.alpha`` explicitly to get the threshold variant).

    Kinks: a numerator of exactly zero counts as dead (zero gradient);
    ``mu_d == eta`` counts as saturated (no gain gradient).
    """
    mu_s = np.asarray(mu_s, dtype=float)
    mu_d = np.asarray(mu_d, dtype=float)
    g = gain(mu_d, params)
    # d gain / d mu_d on the linear branch is slope * g^2
    dgain = np.where(mu_d < params.eta, params.slope * g * g, 0.0)
    if alpha is None:
        live = mu_s > 0.0
        d_s = np.where(live, g, 0.0)
        d_d = np.where(live, mu_s * dgain, 0.0)
        return d_s, d_d
    num = mu_s + alpha * mu_d
    live = num > 0.0
    d_s = np.where(live, g, 0.0)
    d_d = np.where(live, alpha * g + num * dgain, 0.0)
    d_a = np.where(live, mu_d * g, 0.0)
    return d_s, d_d, d_a


def apply_gain_override(mu_s, override: GainOverride):
    """Rectify and multiply by a fixed gain instead of a feedback-driven one.

    ``override`` is a scalar or a vector with one value per unit: the last
    axis of dense activations, the channel axis of ``(N, C, H, W)`` maps.
    """
    mu_s = np.asarray(mu_s, dtype=float) if np.asarray(mu_s).dtype.kind != "f" else np.asarray(mu_s)
    if np.isscalar(override):
        return override * np.maximum(0.0, mu_s)
    override = np.asarray(override, dtype=mu_s.dtype)
    axis = 1 if mu_s.ndim == 4 else -1
    if override.ndim != 1 or mu_s.ndim == 0 or override.shape[0] != mu_s.shape[axis]:
        raise DimensionError(
            f"gain override of length {override.size} does not match unit axis of {mu_s.shape}")
    if mu_s.ndim == 4:
        override = override[:, None, None]
    return override * np.maximum(0.0, mu_s)


@dataclass
class GateRecord:
    """Feedback and gain values logged per gated layer.

    ``mu_d[layer]`` and ``gain[layer]`` are arrays of shape
    ``(instances, units)``; conv layers log one value per filter.
    """

    mu_d: dict = field(default_factory=dict)
    gain: dict = field(default_factory=dict)

    def add(self, layer: str, mu_d: np.ndarray, params: FgReluParams):
        g = gain(mu_d, params)
        if layer in self.mu_d:
            self.mu_d[layer] = np.concatenate([self.mu_d[layer], mu_d])
            self.gain[layer] = np.concatenate([self.gain[layer], g])
        else:
            self.mu_d[layer] = np.array(mu_d)
            self.gain[layer] = np.array(g)

    @property
    def layers(self) -> list:
        return list(self.mu_d)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "unit", "mu_d", "gain"])
            for layer in self.mu_d:
                md, g = self.mu_d[layer], self.gain[layer]
                units = np.broadcast_to(np.arange(md.shape[1]), md.shape)
                for u, m, gg in zip(units.ravel(), md.ravel(), g.ravel()):
                    w.writerow([layer, int(u), repr(float(m)), repr(float(gg))])
