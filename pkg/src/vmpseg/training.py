"""Reverse-mode gradients through the moment graph, Adam, and the training loop."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .elbo import LossConfig, elbo_loss, nll_and_grad, one_hot
from .metrics import mean_dice
from .moments import gaussian_kl, gaussian_kl_grad, make_rng, softplus_grad, sum_to_shape
from .unet import StaleTapeError, _check_input, predict, run

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass
class Gradients:
    """Per conv layer gradients; column k of each array belongs to kernel k."""

    d_mean: list
    d_rho: list
    d_input: np.ndarray = None

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.d_mean, self.d_rho) for a in pair])

    def __iadd__(self, other):
        for a, b in zip(self.d_mean, other.d_mean):
            a += b
        for a, b in zip(self.d_rho, other.d_rho):
            a += b
        return self

    def scale(self, c):
        for a in self.d_mean + self.d_rho:
            a *= c
        return self


@dataclass
class LossParts:
    elbo: float
    nll: float
    kl: float


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    prior_variance: float = 1.0
    checkpoint: str = None
    workers: int = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def backward(model, tape, grad_prob, grad_var=None, input_grad=False):
    """Walk the tape in reverse, applying each op's adjoint.

    ``grad_prob``/``grad_var`` are dLoss/d(prob_mean) and dLoss/d(uncertainty).
    Max-pool argmax positions and ReLU masks are held fixed (subgradients).
    """
    if tape is None or tape.entries is None:
        raise StaleTapeError("no tape: run forward in training mode first")
    if tape.model_version != model.version:
        raise StaleTapeError("model parameters changed since the forward pass")
    d_mean = [np.zeros_like(p.mean) for p in model.params]
    d_var = [np.zeros(p.mean.shape) for p in model.params]
    gm, gv = grad_prob, grad_var
    skip_grads = {}
    for li in range(len(model.ops) - 1, -1, -1):
        op, e = model.ops[li], tape.entries[li]
        kind = op[0]
        if kind == "softmax":
            p, s_in = e
            gm, gv = L.softmax_diag_bwd(gm, gv if s_in is not None else None, p, s_in)
        elif kind == "conv":
            mu, s, v, patches = e
            prm = model.params[op[1]]
            need = li > 0 or input_grad
            dm, dv, gm, gv = L.conv_bwd(gm, gv, mu, s, prm.mean, v, (prm.kh, prm.kw),
                                        op[2], need_input=need, patches=patches)
            d_mean[op[1]] += dm
            if dv is not None:
                d_var[op[1]] += dv
        elif kind == "relu":
            gm, gv = L.relu_bwd(gm, gv, e)
        elif kind == "pool":
            idx, shape = e
            gm, gv = L.maxpool_bwd(gm, gv, idx, shape)
        elif kind == "skip":
            sm, sv = skip_grads.pop(op[1])
            gm = gm + sm
            if sv is not None:
                gv = sv if gv is None else gv + sv
        elif kind == "upconv":
            up_mu, up_s, v, patches = e
            prm = model.params[op[1]]
            dm, dv, gm, gv = L.upconv_bwd(gm, gv, up_mu, up_s, prm.mean, v, patches)
            d_mean[op[1]] += dm
            if dv is not None:
                d_var[op[1]] += dv
        elif kind == "pad":
            gm, gv = L.pad_bwd(gm, gv, op[1])
        elif kind == "concat":
            n_dec, src_shape = e
            enc_m = L.crop_bwd(gm[..., n_dec:], src_shape)
            enc_v = None if gv is None else L.crop_bwd(gv[..., n_dec:], src_shape)
            skip_grads[op[1]] = (enc_m, enc_v)
            gm = gm[..., :n_dec]
            gv = None if gv is None else gv[..., :n_dec]
    d_rho = [sum_to_shape(dv, p.rho.shape) * softplus_grad(p.rho)
             for dv, p in zip(d_var, model.params)]
    return Gradients(d_mean, d_rho, gm if input_grad else None)


def kl_sum(model, prior_variance=1.0):
    return sum(gaussian_kl(p.mean, p.var, prior_variance) for p in model.params)


def effective_loss(model, loss_cfg, kl_weight):
    """Deterministic models train on plug-in cross-entropy without a KL term."""
    if model.config.mode == "deterministic":
        return LossConfig(0.0, loss_cfg.var_floor, "plugin_crossentropy"), 0.0
    return loss_cfg, kl_weight


def total_loss(model, x, y, loss_cfg, kl_weight, prior_variance=1.0):
    """Forward-only ELBO for a batch; used by the finite-difference checker."""
    loss_cfg, kl_weight = effective_loss(model, loss_cfg, kl_weight)
    track = model.config.mode == "vmp"
    p, u, _, _ = run(model, x, track_var=track)
    nll, _, _ = nll_and_grad(p, u if u is not None else np.zeros_like(p), y, loss_cfg)
    kl = kl_sum(model, prior_variance) if kl_weight else 0.0
    return elbo_loss(nll, kl, LossConfig(kl_weight, loss_cfg.var_floor))


def loss_and_grad(model, x, y, loss_cfg, kl_weight, prior_variance=1.0, input_grad=False):
    """ELBO of one batch and its exact gradient w.r.t. every (mean, rho)."""
    loss_cfg, kl_weight = effective_loss(model, loss_cfg, kl_weight)
    track = model.config.mode == "vmp"
    p, u, _, tape = run(model, x, track_var=track, keep_tape=True)
    if u is None:
        u = np.zeros_like(p)
    nll, gp, gu = nll_and_grad(p, u, y, loss_cfg)
    grads = backward(model, tape, gp, gu if track else None, input_grad=input_grad)
    kl = 0.0
    if kl_weight:
        kl = kl_sum(model, prior_variance)
        for i, prm in enumerate(model.params):
            km, kr = gaussian_kl_grad(prm.mean, prm.rho, prior_variance)
            grads.d_mean[i] += kl_weight * km
            grads.d_rho[i] += kl_weight * kr
    elbo = elbo_loss(nll, kl, LossConfig(kl_weight, loss_cfg.var_floor))
    return LossParts(elbo, nll, kl), grads


def _per_sample_grads(model, x, y, loss_cfg, kl_weight, prior_variance, workers):
    """Per-sample gradients reduced in sample order, independent of worker count."""
    def one(i):
        return loss_and_grad(model, x[i:i + 1], y[i:i + 1], loss_cfg, 0.0, prior_variance)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, range(len(x))))
    n = len(x)
    grads = results[0][1]
    nll = results[0][0].nll
    for parts, g in results[1:]:
        grads += g
        nll += parts.nll
    grads.scale(1.0 / n)
    nll /= n
    loss_cfg, kl_weight = effective_loss(model, loss_cfg, kl_weight)
    kl = 0.0
    if kl_weight:
        kl = kl_sum(model, prior_variance)
        for i, prm in enumerate(model.params):
            km, kr = gaussian_kl_grad(prm.mean, prm.rho, prior_variance)
            grads.d_mean[i] += kl_weight * km
            grads.d_rho[i] += kl_weight * kr
    return LossParts(nll + kl_weight * kl, nll, kl), grads


class Adam:
    def __init__(self, model, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = [[np.zeros(p.mean.shape), np.zeros(p.rho.shape)] for p in model.params]
        self.v = [[np.zeros(p.mean.shape), np.zeros(p.rho.shape)] for p in model.params]

    def step(self, model, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, prm in enumerate(model.params):
            for j, (theta, g) in enumerate(((prm.mean, grads.d_mean[i]),
                                            (prm.rho, grads.d_rho[i]))):
                m, v = self.m[i][j], self.v[i][j]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                theta -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        model.touch()


class SGD:
    def __init__(self, model, lr=1e-3):
        self.lr = lr

    def step(self, model, grads):
        for i, prm in enumerate(model.params):
            prm.mean -= self.lr * grads.d_mean[i]
            prm.rho -= self.lr * grads.d_rho[i]
        model.touch()


def make_optimizer(model, cfg):
    if cfg.optimizer == "sgd":
        return SGD(model, cfg.learning_rate)
    return Adam(model, cfg.learning_rate, cfg.betas, cfg.adam_eps)


def train(model, dataset, cfg=None, val=None, callback=None):
    """Optimize (mean, rho) of every kernel on ``dataset``.

    Returns ``(model, history)`` where history holds one dict per epoch with
    keys epoch, elbo, nll, kl, val_dice. The model is updated in place.
    """
    from .checkpoint import save_model

    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    images, masks = dataset.arrays()
    n_classes = model.config.n_classes
    if masks.max() >= n_classes:
        raise ValueError(f"labels must be < {n_classes}")
    _check_input(model, images[:1])
    y_all = one_hot(masks, n_classes)
    kl_weight = cfg.loss.kl_weight
    if kl_weight is None:
        kl_weight = 1.0 / len(dataset)
    opt = make_optimizer(model, cfg)
    rng = make_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = np.zeros(2)
        n_batches = 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], y_all[idx]
            if cfg.workers:
                parts, grads = _per_sample_grads(model, x, y, cfg.loss, kl_weight,
                                                 cfg.prior_variance, cfg.workers)
            else:
                parts, grads = loss_and_grad(model, x, y, cfg.loss, kl_weight,
                                             cfg.prior_variance)
            if not np.isfinite(parts.elbo) or not np.all(np.isfinite(grads.flat())):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {bi}", bi)
            opt.step(model, grads)
            sums += (parts.elbo, parts.nll)
            n_batches += 1
        kl = kl_sum(model, cfg.prior_variance) if model.config.mode == "vmp" else 0.0
        row = {
            "epoch": epoch,
            "elbo": sums[0] / n_batches,
            "nll": sums[1] / n_batches,
            "kl": kl,
            "val_dice": evaluate_dice(model, val) if val is not None and len(val) else float("nan"),
        }
        history.append(row)
        log.info("epoch %d elbo %.5g nll %.5g kl %.5g val_dice %.4f", epoch, row["elbo"],
                 row["nll"], row["kl"], row["val_dice"])
        if cfg.checkpoint:
            # the output path is left out so identical runs give identical bytes
            meta = {k: v for k, v in cfg.to_dict().items() if k != "checkpoint"}
            save_model(model, cfg.checkpoint, extra={"train": meta, "epoch": epoch})
        if callback is not None:
            callback(row)
    return model, history


def evaluate_dice(model, dataset):
    images, masks = dataset.arrays()
    p, _ = predict(model, images)
    return mean_dice(np.argmax(p, axis=-1), masks, model.config.n_classes)


HISTORY_FIELDS = ("epoch", "elbo", "nll", "kl", "val_dice")


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckEntry:
    layer: int
    name: str
    kernel: int
    which: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def max_error(self):
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def mean_error(self):
        return float(np.mean([e.rel_error for e in self.entries])) if self.entries else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tol

    @property
    def failed_layers(self):
        return sorted({e.layer for e in self.entries if e.rel_error > self.tol})


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(model, x, labels, h=1e-5, tol=1e-4, n_params=200, seed=0,
               loss_cfg=None, kl_weight=1.0, prior_variance=1.0, grad_fn=None):
    """Compare analytic gradients with central differences on sampled parameters.

    ``grad_fn(model, x, y)`` may replace the analytic gradient (used for
    negative controls); it must return a :class:`Gradients`.
    """
    loss_cfg = loss_cfg or LossConfig()
    x, _ = _check_input(model, x)
    labels = np.asarray(labels)
    y = labels if labels.shape == x.shape[:3] + (model.config.n_classes,) else \
        one_hot(labels.reshape(x.shape[:3]), model.config.n_classes)
    if grad_fn is None:
        _, grads = loss_and_grad(model, x, y, loss_cfg, kl_weight, prior_variance)
    else:
        grads = grad_fn(model, x, y)
    whiches = ("mean", "rho") if model.config.mode == "vmp" else ("mean",)
    slots = [(i, w, j) for i, prm in enumerate(model.params) for w in whiches
             for j in range((prm.mean if w == "mean" else prm.rho).size)]
    rng = make_rng(seed)
    pick = rng.choice(len(slots), size=min(n_params, len(slots)), replace=False)
    entries = []
    for si in sorted(pick):
        i, which, j = slots[si]
        prm = model.params[i]
        arr = prm.mean if which == "mean" else prm.rho
        flat = arr.reshape(-1)
        old = flat[j]
        flat[j] = old + h
        lp = total_loss(model, x, y, loss_cfg, kl_weight, prior_variance)
        flat[j] = old - h
        lm = total_loss(model, x, y, loss_cfg, kl_weight, prior_variance)
        flat[j] = old
        numeric = (lp - lm) / (2.0 * h)
        g = grads.d_mean[i] if which == "mean" else grads.d_rho[i]
        analytic = float(g.reshape(-1)[j])
        entries.append(GradCheckEntry(i, prm.name, j % prm.kout, which, j, analytic,
                                      numeric, relative_error(analytic, numeric)))
    return GradCheckReport(entries, tol)
