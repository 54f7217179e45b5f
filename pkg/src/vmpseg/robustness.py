"""Perturbation suite: SNR-controlled Gaussian noise, FGSM and targeted PGD."""

import csv
from dataclasses import dataclass

import numpy as np

from .elbo import one_hot
from .metrics import avg_predictive_variance, class_groups, dice, measured_snr
from .moments import make_rng
from .training import backward
from .unet import _check_input, predict, run

MAX_SNR_DB = 120.0
MAX_PGD_STEPS = 20
KINDS = ("gaussian", "fgsm", "pgd")


@dataclass
class AttackConfig:
    kind: str = "gaussian"
    snr_db: float = None
    epsilon: float = None
    region_mask: np.ndarray = None
    steps: int = 20
    step_size: float = None
    source_label: int = None
    target_label: int = None
    clamp: tuple = (0.0, 1.0)
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "gaussian" and self.snr_db is None:
            raise ValueError("gaussian noise needs snr_db")
        if self.kind in ("fgsm", "pgd") and self.epsilon is None:
            raise ValueError(f"{self.kind} needs epsilon")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not 1 <= self.steps <= MAX_PGD_STEPS:
            raise ValueError(f"steps must be between 1 and {MAX_PGD_STEPS}")
        if self.kind == "pgd":
            if self.source_label is None or self.target_label is None:
                raise ValueError("pgd needs source_label and target_label")
            if self.source_label == self.target_label:
                raise ValueError("source and target labels must differ")
        return self

    @property
    def alpha(self):
        return self.epsilon / 4.0 if self.step_size is None else self.step_size


def add_gaussian_noise(image, snr_db, region_mask=None, seed=0):
    """Add white Gaussian noise at a target SNR; returns (noisy, achieved SNR in dB).

    Signal power is the mean squared intensity over the noised region.
    """
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains NaN or Inf")
    if region_mask is None:
        region = np.ones(x.shape, dtype=bool)
    else:
        region = np.asarray(region_mask, dtype=bool)
        if region.shape != x.shape:
            region = np.broadcast_to(region.reshape(region.shape + (1,) * (x.ndim - region.ndim)),
                                     x.shape)
    p_signal = float(np.mean(x[region] ** 2)) if region.any() else 0.0
    if p_signal == 0.0:
        raise ValueError("signal power over the noised region is zero; SNR undefined")
    snr_db = min(float(snr_db), MAX_SNR_DB)
    sigma = np.sqrt(p_signal / 10.0 ** (snr_db / 10.0))
    noise = sigma * make_rng(seed).standard_normal(x.shape)
    noisy = np.where(region, x + noise, x)
    return noisy, measured_snr(x, noisy, region)


def epsilon_for_snr(image, snr_db):
    """Sign perturbations of size eps have power eps^2; solve for the target SNR."""
    p_signal = float(np.mean(np.asarray(image, dtype=np.float64) ** 2))
    return float(np.sqrt(p_signal / 10.0 ** (snr_db / 10.0)))


def input_gradient(model, x, weights):
    """Gradient of -sum(weights * log p) / sum(weights) w.r.t. the input.

    Runs on the mean channel only; the prediction map itself does not depend
    on kernel variances.
    """
    x, _ = _check_input(model, x)
    p, _, _, tape = run(model, x, track_var=False, keep_tape=True)
    total = weights.sum()
    if total == 0:
        return np.zeros_like(x)
    gp = -weights / (p + 1e-12) / total
    return backward(model, tape, gp, None, input_grad=True).d_input


def project(x_adv, x, eps, clamp=(0.0, 1.0)):
    """Clamp to the valid range, then into the eps infinity-ball around x.

    The ball constraint holds exactly in floating point: offending entries
    are nudged one ulp at a time toward x.
    """
    out = np.clip(x_adv, clamp[0], clamp[1])
    out = np.clip(out, x - eps, x + eps)
    for _ in range(4):
        bad = np.abs(out - x) > eps
        if not bad.any():
            break
        out = np.where(bad, np.nextafter(out, x), out)
    return out


def fgsm(model, image, labels, epsilon, clamp=(0.0, 1.0)):
    """Un-targeted fast gradient sign step on the pixel-wise cross-entropy."""
    x, single = _check_input(model, image)
    labels = np.asarray(labels).reshape(x.shape[:3])
    if epsilon == 0:
        return x[0] if single else x
    g = input_gradient(model, x, one_hot(labels, model.config.n_classes))
    adv = project(x + epsilon * np.sign(g), x, epsilon, clamp)
    return adv[0] if single else adv


def pgd_targeted(model, image, labels, cfg, return_trace=False):
    """Push pixels of the source class toward the target class.

    Each iteration descends the target-class cross-entropy over source pixels
    by ``alpha * sign(grad)`` and projects back into the eps-ball and clamp
    range.
    """
    cfg.validate()
    x, single = _check_input(model, image)
    labels = np.asarray(labels).reshape(x.shape[:3])
    n_classes = model.config.n_classes
    weights = np.zeros(x.shape[:3] + (n_classes,))
    weights[..., cfg.target_label] = (labels == cfg.source_label)
    adv = x.copy()
    trace = []
    for _ in range(cfg.steps):
        g = input_gradient(model, adv, weights)
        adv = project(adv - cfg.alpha * np.sign(g), x, cfg.epsilon, cfg.clamp)
        trace.append(adv[0] if single else adv)
    out = adv[0] if single else adv
    return (out, trace) if return_trace else out


def flip_fraction(pred, truth, source, target):
    src = np.asarray(truth) == source
    if not src.any():
        return 0.0
    return float(np.mean(np.asarray(pred)[src] == target))


def perturb_dataset(model, images, masks, cfg, batch_size=16):
    """Apply one perturbation to every image; returns (perturbed, measured SNRs)."""
    cfg.validate()
    out = np.empty_like(images)
    snrs = []
    for i in range(len(images)):
        if cfg.kind == "gaussian":
            region = None if cfg.region_mask is None else cfg.region_mask[i]
            out[i], snr = add_gaussian_noise(images[i], cfg.snr_db, region, seed=(cfg.seed, i))
        else:
            if cfg.kind == "fgsm":
                out[i] = fgsm(model, images[i], masks[i], cfg.epsilon, cfg.clamp)
            else:
                out[i] = pgd_targeted(model, images[i], masks[i], cfg)
            snr = measured_snr(images[i], out[i])
        snrs.append(snr)
    return out, np.array(snrs)


def evaluate(model, images, masks, batch_size=16):
    """Dice per class group (averaged over images) and average predictive variance."""
    p, u = predict(model, images, batch_size)
    pred = np.argmax(p, axis=-1)
    row = {}
    for name, group in class_groups(model.config.n_classes).items():
        row[name] = float(np.mean([dice(a, b, group) for a, b in zip(pred, masks)]))
    row["avg_predictive_variance"] = avg_predictive_variance(u)
    return row, pred


def attack_sweep(model, dataset, kind, values, source=None, target=None, steps=20,
                 step_size=None, seed=0, snr_eps=False):
    """Evaluate the model at each perturbation level.

    ``values`` are SNRs in dB for gaussian noise, epsilons for fgsm/pgd; with
    ``snr_eps`` fgsm/pgd values are SNRs converted per image to epsilons.
    """
    images, masks = dataset.arrays()
    rows = []
    for value in values:
        if kind != "gaussian" and snr_eps:
            perturbed = np.empty_like(images)
            snrs = []
            for i in range(len(images)):
                eps = epsilon_for_snr(images[i], value)
                cfg = AttackConfig(kind, epsilon=eps, steps=steps, step_size=step_size,
                                   source_label=source, target_label=target, seed=seed)
                p_i, s_i = perturb_dataset(model, images[i:i + 1], masks[i:i + 1], cfg)
                perturbed[i] = p_i[0]
                snrs.append(s_i[0])
            snrs = np.array(snrs)
        else:
            cfg = AttackConfig(kind, snr_db=value if kind == "gaussian" else None,
                               epsilon=None if kind == "gaussian" else value, steps=steps,
                               step_size=step_size, source_label=source, target_label=target,
                               seed=seed)
            perturbed, snrs = perturb_dataset(model, images, masks, cfg)
        row, pred = evaluate(model, perturbed, masks)
        out = {"snr_or_eps": float(value), "measured_snr": float(np.mean(snrs))}
        out.update(row)
        if kind == "pgd":
            out["flip_fraction"] = flip_fraction(pred, masks, source, target)
        rows.append(out)
    return rows


def write_sweep_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
