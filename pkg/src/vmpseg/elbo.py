"""Training objective: expected negative log-likelihood plus weighted KL."""

from dataclasses import asdict, dataclass

import numpy as np

from .tensors import GeometryError

LIKELIHOODS = ("gaussian_predictive", "plugin_crossentropy")


@dataclass
class LossConfig:
    """``kl_weight=None`` means 1/N_train, resolved when training starts."""

    kl_weight: float = None
    var_floor: float = 1e-3
    likelihood_form: str = "gaussian_predictive"

    def __post_init__(self):
        if not self.var_floor > 0:
            raise ValueError("var_floor must be positive")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.likelihood_form not in LIKELIHOODS:
            raise ValueError(f"likelihood_form must be one of {LIKELIHOODS}")

    def to_dict(self):
        return asdict(self)


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return (labels[..., None] == np.arange(n_classes)).astype(np.float64)


def _diag(cov_or_var, prob_shape):
    a = np.asarray(cov_or_var, dtype=np.float64)
    if a.shape == prob_shape:
        return a
    if a.shape == prob_shape + prob_shape[-1:]:
        return np.diagonal(a, axis1=-2, axis2=-1)
    raise GeometryError(f"variance shape {a.shape} incompatible with {prob_shape}")


def nll_terms(prob, var, y, cfg):
    """Per-pixel loss and its gradients w.r.t. prob and predictive variance."""
    eps = cfg.var_floor
    if cfg.likelihood_form == "plugin_crossentropy":
        q = prob + eps
        return -np.sum(y * np.log(q), axis=-1), -y / q, None
    v = var + eps
    r = y - prob
    per_pixel = np.sum(r * r / (2.0 * v) + 0.5 * np.log(2.0 * np.pi * v), axis=-1)
    return per_pixel, -r / v, 0.5 / v - r * r / (2.0 * v * v)


def expected_nll(prob, cov, labels, cfg=None):
    """Mean over pixels of the per-pixel negative log-likelihood.

    ``cov`` may be the per-pixel C x C covariance or just its diagonal;
    ``labels`` may be one-hot (same shape as ``prob``) or integer class maps.
    """
    cfg = cfg or LossConfig()
    prob = np.asarray(prob, dtype=np.float64)
    y = np.asarray(labels)
    if y.shape != prob.shape:
        if y.shape != prob.shape[:-1]:
            raise GeometryError(f"labels shape {y.shape} does not match {prob.shape}")
        y = one_hot(y, prob.shape[-1])
    var = _diag(cov, prob.shape) if cov is not None else np.zeros_like(prob)
    per_pixel, _, _ = nll_terms(prob, var, y.astype(np.float64), cfg)
    return float(np.mean(per_pixel))


def nll_and_grad(prob, var, y, cfg):
    """Batch NLL (mean over every pixel of every sample) and its gradients."""
    per_pixel, gp, gv = nll_terms(prob, var, y, cfg)
    scale = 1.0 / per_pixel.size
    return float(np.mean(per_pixel)), gp * scale, None if gv is None else gv * scale


def elbo_loss(nll, kl_sum, cfg=None):
    cfg = cfg or LossConfig()
    if kl_sum < 0:
        raise ValueError("kl_sum must be nonnegative")
    w = 0.0 if cfg.kl_weight is None else cfg.kl_weight
    return nll + w * kl_sum
