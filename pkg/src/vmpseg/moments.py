"""Random-variable carriers and the Gaussian variational kernel."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensors import DataError, GeometryError


def make_rng(seed):
    """Counter-based generator (Philox) so every stochastic path is reproducible."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def softplus(rho):
    return np.logaddexp(0.0, rho)


def softplus_grad(rho):
    return expit(rho)


def inverse_softplus(var):
    var = np.asarray(var, dtype=np.float64)
    # log(expm1(v)) loses precision for large v; v + log1p(-exp(-v)) does not
    return var + np.log(-np.expm1(-var))


@dataclass(frozen=True)
class RandomTensor:
    """A feature map carried as (mean, diagonal variance) of identical shape."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise GeometryError(f"mean shape {mean.shape} != var shape {var.shape}")
        if np.any(var < 0):
            raise DataError("variance must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def shape(self):
        return self.mean.shape

    @classmethod
    def deterministic(cls, mean):
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))


@dataclass(frozen=True)
class VariationalKernel:
    """Posterior over one convolution kernel: N(mean, diag(softplus(rho)))."""

    mean: np.ndarray
    rho: np.ndarray
    kh: int = 1
    kw: int = 1
    in_channels: int = field(default=0)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        rho = np.asarray(self.rho, dtype=np.float64).ravel()
        if mean.shape != rho.shape:
            raise GeometryError("kernel mean and rho must have equal length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(rho))):
            raise DataError("kernel parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rho", rho)
        if self.in_channels == 0:
            object.__setattr__(self, "in_channels", mean.size // (self.kh * self.kw))
        if self.kh * self.kw * self.in_channels != mean.size:
            raise GeometryError("kernel shape metadata does not match its length")

    @property
    def size(self):
        return self.mean.size

    @property
    def variance(self):
        return kernel_variance(self)

    @classmethod
    def from_variance(cls, mean, var, kh=1, kw=1, in_channels=0):
        return cls(mean, inverse_softplus(var), kh, kw, in_channels)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean isotropic Gaussian prior on every kernel element."""

    prior_variance: float = 1.0

    def __post_init__(self):
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")


def kernel_variance(k):
    """Diagonal of the kernel covariance; strictly positive for finite rho."""
    return softplus(k.rho)


def sample_kernel(k, seed):
    """Draw ``mean + sqrt(var) * eps`` with eps from a Philox stream."""
    eps = make_rng(seed).standard_normal(k.size)
    return k.mean + np.sqrt(kernel_variance(k)) * eps


def gaussian_kl(mean, var, prior_variance=1.0):
    """Sum of elementwise KL(N(mean, var) || N(0, prior_variance))."""
    r = var / prior_variance
    return 0.5 * float(np.sum(r + mean * mean / prior_variance - 1.0 - np.log(r)))


def sum_to_shape(g, shape):
    """Sum a gradient over the axes along which a parameter of ``shape`` was broadcast."""
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def gaussian_kl_grad(mean, rho, prior_variance=1.0):
    """Gradient of :func:`gaussian_kl` with respect to (mean, rho).

    ``rho`` may be shared along axes where it has extent 1 (one variance for
    a whole kernel); its gradient then sums over the elements it covers.
    """
    var = np.broadcast_to(softplus(rho), np.shape(mean))
    d_mean = mean / prior_variance
    d_var = 0.5 * (1.0 / prior_variance - 1.0 / var)
    return d_mean, sum_to_shape(d_var, np.shape(rho)) * softplus_grad(rho)


def kernel_kl(k, prior=None):
    prior = prior or PriorSpec()
    return gaussian_kl(k.mean, kernel_variance(k), prior.prior_variance)


def kernel_kl_grad(k, prior=None):
    prior = prior or PriorSpec()
    return gaussian_kl_grad(k.mean, k.rho, prior.prior_variance)
