"""Brute-force Monte Carlo check of the moment-propagation rules.

Inputs and kernel weights are sampled jointly from their Gaussians, pushed
through the exact layer function (true ReLU, true softmax, true max), and the
empirical moments are compared against the analytic ones.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .moments import RandomTensor, make_rng
from .tensors import im2col

MIN_SAMPLES = 1000
CHUNK = 10000
OPS = ("conv_first", "conv_random", "relu", "maxpool", "maxpool_fixed", "upsample",
       "upconv", "pad", "crop", "concat", "softmax")


@dataclass
class MCMoments:
    """Empirical moments with their standard errors."""

    mean: np.ndarray
    var: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray
    n_samples: int


def _gauss(rng, mean, var, n):
    return mean + np.sqrt(var) * rng.standard_normal((n,) + mean.shape)


def _conv_samples(x, w, ksize, pad):
    n = x.shape[0]
    cols, (oh, ow) = im2col(x, ksize, pad)
    out = np.matmul(cols.reshape(n, oh * ow, -1), w)
    return out.reshape(n, oh, ow, -1)


def _sampler(layer_op, inp, kernel, params):
    """Return ``draw(rng, n) -> (n, ...)`` samples of the exact layer output."""
    if layer_op in ("conv_first", "conv_random", "upconv"):
        if kernel is None:
            raise ValueError(f"{layer_op} needs a kernel")
        km, kv, _ = L._kernel_arrays(kernel)
    if layer_op == "concat":
        dec, enc = inp
    else:
        mu = np.asarray(getattr(inp, "mean", inp), dtype=np.float64)
        s = np.asarray(getattr(inp, "var", np.zeros_like(mu)), dtype=np.float64)

    if layer_op in ("conv_first", "conv_random"):
        ksize = params.get("kernel_hw", (3, 3))
        pad = params.get("zero_pad", 0)
        if layer_op == "conv_first":
            s = np.zeros_like(mu)

        def draw(rng, n):
            x = _gauss(rng, mu, s, n)
            return _conv_samples(x, _gauss(rng, km, kv, n), ksize, pad)
    elif layer_op == "upconv":
        def draw(rng, n):
            x = L.upsample_fwd(_gauss(rng, mu, s, n))
            return _conv_samples(x, _gauss(rng, km, kv, n), L.UPCONV_KERNEL, L.UPCONV_PAD)
    elif layer_op == "relu":
        def draw(rng, n):
            return np.maximum(_gauss(rng, mu, s, n), 0.0)
    elif layer_op == "maxpool":
        def draw(rng, n):
            return L._windows(_gauss(rng, mu, s, n)).max(axis=-1)
    elif layer_op == "maxpool_fixed":
        # the co-pool rule: sample values gathered at the mean's argmax
        _, _, idx = L.maxpool_fwd(mu[None], None)

        def draw(rng, n):
            wins = L._windows(_gauss(rng, mu, s, n))
            return np.take_along_axis(wins, np.broadcast_to(idx[..., None], wins.shape[:-1] + (1,)),
                                      axis=-1)[..., 0]
    elif layer_op == "upsample":
        def draw(rng, n):
            return L.upsample_fwd(_gauss(rng, mu, s, n))
    elif layer_op == "pad":
        w = params["width"]
        sigma_pa = params["sigma_pa"]

        def draw(rng, n):
            x = _gauss(rng, mu, s, n)
            h, wd = mu.shape[:2]
            out = np.sqrt(sigma_pa) * rng.standard_normal((n, h + 2 * w, wd + 2 * w) + mu.shape[2:])
            out[:, w:w + h, w:w + wd] = x
            return out
    elif layer_op == "crop":
        target = params["target_hw"]

        def draw(rng, n):
            return L.crop_fwd(_gauss(rng, mu, s, n), None, target)[0]
    elif layer_op == "concat":
        def draw(rng, n):
            return np.concatenate([_gauss(rng, dec.mean, dec.var, n),
                                   _gauss(rng, enc.mean, enc.var, n)], axis=-1)
    elif layer_op == "softmax":
        def draw(rng, n):
            return L.softmax(_gauss(rng, mu, s, n))
    else:
        raise ValueError(f"unknown layer_op {layer_op!r}; expected one of {OPS}")
    return draw


def mc_layer_moments(layer_op, inp, kernel=None, n_samples=100_000, seed=0, **params):
    """Empirical output mean/variance of ``layer_op`` under joint sampling.

    ``inp`` is a RandomTensor (a (dec, enc) pair for concat). Extra keyword
    parameters: kernel_hw and zero_pad (convs), width and sigma_pa (pad),
    target_hw (crop). Samples are drawn in chunks, each from its own stream
    derived from ``seed``, and reduced in chunk order.
    """
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"n_samples must be >= {MIN_SAMPLES}")
    draw = _sampler(layer_op, inp, kernel, params)
    sums = None
    shift = None
    done = 0
    chunk = 0
    while done < n_samples:
        n = min(CHUNK, n_samples - done)
        y = draw(make_rng((seed, chunk)), n)
        if shift is None:
            shift = y.mean(axis=0)
        d = y - shift
        d2 = d * d
        part = [d.sum(axis=0), d2.sum(axis=0), (d2 * d).sum(axis=0), (d2 * d2).sum(axis=0)]
        sums = part if sums is None else [a + b for a, b in zip(sums, part)]
        done += n
        chunk += 1
    n = float(n_samples)
    r1, r2, r3, r4 = (a / n for a in sums)
    m2 = r2 - r1 ** 2
    m4 = r4 - 4 * r1 * r3 + 6 * r1 ** 2 * r2 - 3 * r1 ** 4
    m2 = np.maximum(m2, 0.0)
    var = m2 * n / (n - 1)
    se_var = np.sqrt(np.maximum(m4 - (n - 3) / (n - 1) * m2 ** 2, 0.0) / n)
    return MCMoments(shift + r1, var, np.sqrt(var / n), se_var, n_samples)


@dataclass
class MomentReport:
    policy: str
    passed: bool
    n_checked: int
    n_skipped: int
    failures: list = field(default_factory=list)  # (coordinate, quantity)
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        fields = ("index", "quantity", "analytic", "empirical", "se", "verdict")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def regime_cov(analytic):
    """Coefficient of variation sqrt(var)/|mean|; inf where the mean is 0."""
    mean = np.abs(analytic.mean)
    sd = np.sqrt(analytic.var)
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = np.where(mean > 0, sd / np.where(mean > 0, mean, 1.0), np.inf)
    return cov


def compare_moments(analytic, empirical, policy="exact_linear", regime_mask=None,
                    rel_tol=0.15, max_cov=0.3):
    """Check analytic moments against the oracle, element by element.

    exact_linear: pass iff |dmean| <= 3 SE and |dvar| <= 4 SE everywhere.
    taylor_regime: relative error <= ``rel_tol`` on elements whose analytic
    CoV is at most ``max_cov`` (and ``regime_mask`` holds); the rest are
    skipped and counted.
    """
    am = np.asarray(analytic.mean, dtype=np.float64)
    av = np.asarray(analytic.var, dtype=np.float64)
    if am.shape != empirical.mean.shape:
        raise ValueError(f"shape mismatch: {am.shape} vs {empirical.mean.shape}")
    dm = np.abs(am - empirical.mean)
    dv = np.abs(av - empirical.var)
    if policy == "exact_linear":
        checked = np.ones(am.shape, dtype=bool)
        ok_m = dm <= 3.0 * empirical.se_mean
        ok_v = dv <= 4.0 * empirical.se_var
        lim_m, lim_v = empirical.se_mean, empirical.se_var
    elif policy == "taylor_regime":
        checked = regime_cov(analytic) <= max_cov
        if regime_mask is not None:
            checked &= np.asarray(regime_mask, dtype=bool)
        tiny = np.finfo(float).tiny
        ok_m = dm <= rel_tol * np.maximum(np.abs(empirical.mean), tiny)
        ok_v = dv <= rel_tol * np.maximum(empirical.var, tiny)
        lim_m, lim_v = empirical.se_mean, empirical.se_var
    else:
        raise ValueError("policy must be 'exact_linear' or 'taylor_regime'")
    failures = []
    rows = []
    for idx in np.ndindex(am.shape):
        for q, a, e, se, ok in (("mean", am, empirical.mean, lim_m, ok_m),
                                ("var", av, empirical.var, lim_v, ok_v)):
            if not checked[idx]:
                verdict = "skipped"
            elif ok[idx]:
                verdict = "pass"
            else:
                verdict = "fail"
                failures.append((idx, q))
            rows.append({"index": "/".join(map(str, idx)), "quantity": q,
                         "analytic": repr(float(a[idx])), "empirical": repr(float(e[idx])),
                         "se": repr(float(se[idx])), "verdict": verdict})
    n_checked = int(checked.sum())
    return MomentReport(policy, not failures, n_checked, int(checked.size - n_checked),
                        failures, rows)


def analytic_moments(layer_op, inp, kernel=None, **params):
    """The closed-form counterpart of :func:`mc_layer_moments`, for comparisons."""
    if layer_op == "conv_first":
        rt = RandomTensor.deterministic(np.asarray(getattr(inp, "mean", inp)))
        return L.conv_moments(rt, kernel, params.get("kernel_hw", (3, 3)),
                              params.get("zero_pad", 0))
    if layer_op == "conv_random":
        return L.conv_moments(inp, kernel, params.get("kernel_hw", (3, 3)),
                              params.get("zero_pad", 0))
    if layer_op == "upconv":
        return L.upconv_moments(inp, kernel)
    if layer_op == "relu":
        return L.relu_moments(inp)
    if layer_op in ("maxpool", "maxpool_fixed"):
        return L.maxpool_moments(inp)
    if layer_op == "upsample":
        return L.upsample_moments(inp)
    if layer_op == "pad":
        return L.pad_moments(inp, params["width"], params["sigma_pa"])
    if layer_op == "crop":
        return L.crop_to(inp, params["target_hw"])
    if layer_op == "concat":
        return L.concat_moments(*inp)
    if layer_op == "softmax":
        p, cov = L.softmax_moments(inp)
        return RandomTensor(p, np.diagonal(cov, axis1=-2, axis2=-1).copy())
    raise ValueError(f"unknown layer_op {layer_op!r}")


EXACT_OPS = ("conv_first", "conv_random", "upsample", "upconv", "pad", "crop", "concat")
TAYLOR_OPS = ("relu", "softmax")


def _random_map(rng, h, w, c, var_range=(0.01, 0.5)):
    return RandomTensor(rng.normal(size=(h, w, c)), rng.uniform(*var_range, size=(h, w, c)))


def random_config(layer_op, rng):
    """A small randomized (input, kernel, params) triple for ``layer_op``."""
    c = int(rng.integers(1, 3))
    k = int(rng.integers(1, 3))
    if layer_op in ("conv_first", "conv_random"):
        h, w = (int(a) for a in rng.integers(3, 6, size=2))
        pad = int(rng.integers(0, 2))
        g = _random_map(rng, h, w, c)
        if layer_op == "conv_first":
            g = RandomTensor.deterministic(rng.uniform(0.0, 1.0, size=(h, w, c)))
        kern = (rng.normal(size=(9 * c, k)), rng.uniform(0.01, 0.3, size=(9 * c, k)))
        return g, kern, {"kernel_hw": (3, 3), "zero_pad": pad}
    if layer_op == "upconv":
        h, w = (int(a) for a in rng.integers(2, 4, size=2))
        kern = (rng.normal(size=(4 * c, k)), rng.uniform(0.01, 0.3, size=(4 * c, k)))
        return _random_map(rng, h, w, c), kern, {}
    if layer_op == "upsample":
        h, w = (int(a) for a in rng.integers(2, 4, size=2))
        return _random_map(rng, h, w, c), None, {}
    if layer_op == "pad":
        h, w = (int(a) for a in rng.integers(2, 4, size=2))
        return _random_map(rng, h, w, c), None, {"width": int(rng.integers(1, 3)),
                                                 "sigma_pa": float(rng.uniform(0.01, 0.1))}
    if layer_op == "crop":
        h, w = (int(a) for a in rng.integers(3, 7, size=2))
        th, tw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        return _random_map(rng, h, w, c), None, {"target_hw": (th, tw)}
    if layer_op == "concat":
        h, w = (int(a) for a in rng.integers(2, 4, size=2))
        return (_random_map(rng, h, w, c), _random_map(rng, h, w, k)), None, {}
    if layer_op in ("maxpool", "maxpool_fixed"):
        h, w = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
        return _random_map(rng, h, w, c), None, {}
    if layer_op == "relu":
        # mix of elements deep on either side of the kink and near it
        shape = (3, 3, c)
        sd = np.sqrt(rng.uniform(0.01, 1.0, size=shape))
        mean = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.0, 6.0, size=shape) * sd
        return RandomTensor(mean, sd * sd), None, {}
    if layer_op == "softmax":
        n_cls = int(rng.integers(2, 5))
        shape = (2, 2, n_cls)
        return RandomTensor(rng.normal(0.0, 1.0, size=shape),
                            rng.uniform(0.0, 0.15, size=shape) ** 2), None, {}
    raise ValueError(f"unknown layer_op {layer_op!r}")


def regime_mask(layer_op, inp):
    """Extra per-element Taylor predicate: ReLU inputs must sit 2 sd from the kink."""
    if layer_op == "relu":
        return np.abs(inp.mean) >= 2.0 * np.sqrt(inp.var)
    return None


def check_config(layer_op, inp, kernel, params, n_samples=100_000, seed=0):
    """Run one oracle comparison under the op's policy; returns the MomentReport."""
    policy = "taylor_regime" if layer_op in TAYLOR_OPS else "exact_linear"
    emp = mc_layer_moments(layer_op, inp, kernel, n_samples, seed, **params)
    ana = analytic_moments(layer_op, inp, kernel, **params)
    return compare_moments(ana, emp, policy, regime_mask(layer_op, inp))


def verification_suite(seed=0, n_samples=100_000, ops=EXACT_OPS + TAYLOR_OPS + ("maxpool_fixed",)):
    """One randomized configuration per op; yields (op, MomentReport)."""
    rng = make_rng(seed)
    for i, op in enumerate(ops):
        inp, kern, params = random_config(op, rng)
        yield op, check_config(op, inp, kern, params, n_samples, seed=(seed, i))


def config_sweep(layer_op, n_configs=100, seed=0, n_samples=100_000):
    """Check ``n_configs`` randomized configurations of one op; returns the reports."""
    rng = make_rng((seed, OPS.index(layer_op)))
    reports = []
    for i in range(n_configs):
        inp, kern, params = random_config(layer_op, rng)
        reports.append(check_config(layer_op, inp, kern, params, n_samples, seed=(seed, i)))
    return reports
