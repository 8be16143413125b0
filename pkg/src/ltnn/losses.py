"""Training objectives.

All image-level losses reduce the same way: sum over the elements of each
batch item, then mean over the batch. Probabilities entering a log are
clamped to [eps, 1-eps] first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tensor import shift

LOG_EPS = 1e-7

CSV_COLUMNS = ("step", "adv_d", "adv_g", "recon", "smooth", "consist", "total")


class NonFiniteLossError(RuntimeError):
    """Raised to abort training when a loss component goes NaN/Inf."""

    def __init__(self, component, value):
        super().__init__(f"loss component {component!r} is non-finite: {value}")
        self.component = component


@dataclass
class LossWeights:
    adv: float = 1.0
    recon: float = 10.0
    smooth: float = 0.05
    consist: float = 0.05


@dataclass
class LossBreakdown:
    """Unweighted components plus the weighted generator total."""

    adv_d: float
    adv_g: float
    recon: float
    smooth: float
    consist: float
    total: float


def _batch_mean_sum(t, batch):
    return t.sum() * (1.0 / batch)


def loss_adv_d(d_real, d_fake):
    """Discriminator objective: -log d_real - log(1 - d_fake), mean over batch."""
    n = d_real.shape[0]
    real_term = d_real.clamp(LOG_EPS, 1.0 - LOG_EPS).log().sum()
    fake_term = (-d_fake + 1.0).clamp(LOG_EPS, 1.0 - LOG_EPS).log().sum()
    return (real_term + fake_term) * (-1.0 / n)


def loss_adv_g(d_fake):
    """Generator adversarial objective: -log d_fake, mean over batch."""
    n = d_fake.shape[0]
    return d_fake.clamp(LOG_EPS, 1.0 - LOG_EPS).log().sum() * (-1.0 / n)


def loss_recon(y_hat, y):
    """Sum of squared differences per image, mean over the batch."""
    d = y_hat - y
    return _batch_mean_sum(d * d, y_hat.shape[0])


def loss_smooth(y_hat):
    """Mean over the eight one-pixel replicate-boundary shifts of the L1
    distance between the image and its shifted copy (the (0,0) term is zero
    and is included in the 1/8 normalizer)."""
    n = y_hat.shape[0]
    total = None
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            if i == 0 and j == 0:
                continue
            term = (y_hat - shift(y_hat, i, j)).abs().sum()
            total = term if total is None else total + term
    return total * (1.0 / (8.0 * n))


def loss_consist(l_hat, l_target):
    """L1 between the transformed latent and the (detached) target encoding."""
    if l_hat.shape != l_target.shape:
        raise ValueError(f"loss_consist: latent shapes differ: {l_hat.shape} vs {l_target.shape}")
    target = l_target.detach() if l_target._in_graph() else l_target
    return _batch_mean_sum((l_hat - target).abs(), l_hat.shape[0])


def combine(adv_g, recon, smooth, consist, weights):
    """Weighted generator total as a graph node, for backward()."""
    return (
        adv_g * weights.adv
        + recon * weights.recon
        + smooth * weights.smooth
        + consist * weights.consist
    )


def loss_total(adv_g, recon, smooth, consist, weights, adv_d=0.0):
    """Assemble the per-step breakdown; aborts if any component is non-finite.

    total = adv*adv_g + recon*recon + smooth*smooth + consist*consist with the
    components themselves stored unweighted.
    """
    values = {
        "adv_d": float(adv_d),
        "adv_g": float(adv_g),
        "recon": float(recon),
        "smooth": float(smooth),
        "consist": float(consist),
    }
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    total = (
        weights.adv * values["adv_g"]
        + weights.recon * values["recon"]
        + weights.smooth * values["smooth"]
        + weights.consist * values["consist"]
    )
    if not math.isfinite(total):
        raise NonFiniteLossError("total", total)
    return LossBreakdown(total=total, **values)
