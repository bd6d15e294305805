"""Training losses and their split into per-network objectives.

All squared-error terms are means over batch and elements.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from casdm import schedule as sch
from casdm.metricfn import FeatureExtractor, MetricTransform, feature_distance
from casdm.model import CasDmOutput, Variant
from casdm.netcore import ad
from casdm.netcore.autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_eps: float = 1.0
    lambda_x0: float = 1.0
    lambda_mu: float = 1.0
    lambda_lpips: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")


@dataclass(frozen=True)
class LossReport:
    l_eps: float
    l_x0: float
    l_mu: float
    l_lpips: float
    l_theta: float
    l_phi: float
    t: float

    def row(self) -> dict:
        return asdict(self)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(np.asarray(x))


def mse(target, pred) -> Tensor:
    target, pred = _t(target), _t(pred)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {pred.shape}")
    return ad.mean(ad.square(pred - target))


def loss_eps(eps_true, eps_pred) -> Tensor:
    return mse(eps_true, eps_pred)


def loss_x0(x0_true, x0_pred) -> Tensor:
    return mse(x0_true, x0_pred)


def loss_mu(mu_tilde, mu_x0, mu_eps, r) -> Tensor:
    """Squared error of the r-mixed mean; only ``r`` receives gradient."""
    mx = ad.stop_gradient(_t(mu_x0))
    me = ad.stop_gradient(_t(mu_eps))
    mixed = r * mx + (1 - r) * me
    return mse(mu_tilde, mixed)


def metric_loss(x0_true, x0_pred, extractor: FeatureExtractor, transform: MetricTransform) -> Tensor:
    extractor.check_resolution(transform.size)
    fa = extractor.extract(transform(_t(x0_true)))
    fb = extractor.extract(transform(_t(x0_pred)))
    return feature_distance(fa, fb)


def compose_losses(l_eps, l_x0, l_mu, l_lpips, w: LossWeights):
    """(l_theta, l_phi) as weighted sums; works on floats or graph tensors."""
    l_theta = w.lambda_eps * l_eps
    l_phi = w.lambda_x0 * l_x0 + w.lambda_mu * l_mu + w.lambda_lpips * l_lpips
    return l_theta, l_phi


def training_objectives(
    variant: Variant | str,
    out: CasDmOutput,
    x0: np.ndarray,
    x_t: np.ndarray,
    eps: np.ndarray,
    t: np.ndarray,
    sched: sch.NoiseSchedule,
    weights: LossWeights,
    extractor: FeatureExtractor | None,
    transform: MetricTransform,
) -> tuple[dict[str, Tensor], LossReport]:
    """Per-network scalar objectives for one forward pass, plus a report.

    The returned mapping has one entry per network that gets an optimizer
    step: theta and phi for ``casdm``, just theta for the single-net variants.
    """
    variant = Variant(variant)
    zero = ad.constant(np.zeros((), dtype=np.float32))
    l_e = l_x = l_m = l_lp = zero

    if out.eps_pred is not None:
        l_e = loss_eps(eps, out.eps_pred)
    if out.x0_pred is not None:
        l_x = loss_x0(x0, out.x0_pred)
        if weights.lambda_lpips > 0:
            if extractor is None:
                raise ValueError("lambda_lpips > 0 needs a feature extractor")
            l_lp = metric_loss(x0, out.x0_pred, extractor, transform)
    if out.r is not None:
        mu_tilde = sch.posterior_mean(x0, x_t, t, sched)
        mu_x0 = sch.posterior_mean(out.x0_pred.data, x_t, t, sched)
        mu_eps = sch.mu_from_eps(x_t, out.eps_pred.data, t, sched)
        l_m = loss_mu(mu_tilde, mu_x0, mu_eps, out.r)

    l_theta, l_phi = compose_losses(l_e, l_x, l_m, l_lp, weights)
    if variant is Variant.CASDM:
        objectives = {"theta": l_theta, "phi": l_phi}
    elif variant is Variant.DDPM_EPS:
        objectives = {"theta": l_theta}
    elif variant is Variant.DDPM_X0:
        objectives = {"theta": l_phi}
    else:
        objectives = {"theta": l_theta + l_phi}

    report = LossReport(
        l_eps=float(l_e.data),
        l_x0=float(l_x.data),
        l_mu=float(l_m.data),
        l_lpips=float(l_lp.data),
        l_theta=float(l_theta.data),
        l_phi=float(l_phi.data),
        t=float(np.mean(t)),
    )
    return objectives, report
