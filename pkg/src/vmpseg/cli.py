"""Command line entry point: gen, train, eval, attack, maps, verify."""

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import checkpoint, datagen, mc_oracle, robustness, training, unet
from .elbo import LossConfig
from .moments import inverse_softplus, make_rng

log = logging.getLogger("vmpseg")

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _write_rows(rows, path):
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_gen(args):
    cfg = datagen.ShapeTaskConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    ds = datagen.generate(cfg)
    datagen.save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)


def cmd_train(args):
    """Config JSON holds optional "network" and "train" objects."""
    conf = _read_json(args.config)
    unknown = set(conf) - {"network", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    data = datagen.load_dataset(args.data)
    if len(data) == 0:
        raise ValueError("training set is empty")
    net = dict(conf.get("network", {}))
    h, w, c_in = data[0].image.shape
    net.setdefault("input_shape", [h, w, c_in])
    net.setdefault("n_classes", data.n_classes)
    net_cfg = unet.NetworkConfig.from_dict(net)
    net_cfg.validate()
    tr = dict(conf.get("train", {}))
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.epochs is not None:
        tr["epochs"] = args.epochs
    tr_cfg = training.TrainConfig.from_dict(tr)
    tr_cfg.checkpoint = args.out
    val = datagen.load_dataset(args.val) if args.val else None
    model = unet.build(net_cfg, seed=tr_cfg.seed)
    model, history = training.train(model, data, tr_cfg, val=val)
    if not history:
        meta = {k: v for k, v in tr_cfg.to_dict().items() if k != "checkpoint"}
        checkpoint.save_model(model, args.out, extra={"train": meta, "epoch": 0})
    if args.history:
        training.write_history_csv(history, args.history)


def cmd_eval(args):
    model = checkpoint.load_model(args.model)
    data = datagen.load_dataset(args.data)
    images, masks = data.arrays()
    row, _ = robustness.evaluate(model, images, masks)
    out = {"n_images": len(data)}
    out.update(row)
    _write_rows([out], args.report)
    for k, v in out.items():
        print(f"{k}: {v}")


def cmd_attack(args):
    if (args.snr_db is None) == (args.eps is None):
        raise UsageError("give exactly one of --snr-db or --eps")
    if args.kind == "gaussian" and args.eps is not None:
        raise UsageError("gaussian noise is specified with --snr-db")
    if args.kind == "pgd" and (args.source is None or args.target is None):
        raise UsageError("pgd needs --source and --target")
    model = checkpoint.load_model(args.model)
    data = datagen.load_dataset(args.data)
    values = args.snr_db if args.snr_db is not None else args.eps
    rows = robustness.attack_sweep(model, data, args.kind, values, args.source, args.target,
                                   args.steps, args.step_size, args.seed or 0,
                                   snr_eps=args.snr_db is not None)
    robustness.write_sweep_csv(rows, args.report)


def cmd_maps(args):
    model = checkpoint.load_model(args.model)
    data = datagen.load_dataset(args.data)
    if not 0 <= args.index < len(data):
        raise ValueError(f"index {args.index} out of range for {len(data)} samples")
    out = unet.forward(model, data[args.index].image)
    # one pass gives both panels; uncertainty is the variance of the chosen class
    unc = np.take_along_axis(out.uncertainty, out.class_map[..., None], axis=-1)[..., 0]
    datagen.export_pgm(out.class_map, f"{args.out_prefix}_seg.pgm", "fixed",
                       vmax=max(model.config.n_classes - 1, 1))
    datagen.export_pgm(unc, f"{args.out_prefix}_unc.pgm", args.unc_norm, vmax=args.unc_vmax)


def cmd_verify(args):
    seed = args.seed or 0
    ok = True
    rows = []
    for op, rep in mc_oracle.verification_suite(seed, args.samples):
        ok &= rep.passed
        rows.append({"check": f"oracle:{op}", "passed": rep.passed, "checked": rep.n_checked,
                     "skipped": rep.n_skipped, "failures": len(rep.failures)})
    cfg = unet.NetworkConfig(input_shape=(16, 16, 1), n_classes=3, encoder=[3, 4], decoder=[3])
    model = unet.build(cfg, seed=seed)
    rng = make_rng(seed)
    for p in model.params:
        p.rho[:] = inverse_softplus(rng.uniform(1e-3, 5e-2, p.rho.shape))
    x = rng.uniform(0.0, 1.0, (16, 16, 1))
    labels = rng.integers(0, 3, (16, 16))
    gc = training.grad_check(model, x, labels, n_params=args.grad_params, seed=seed,
                             loss_cfg=LossConfig(), kl_weight=1.0)
    ok &= gc.passed
    rows.append({"check": "grad_check", "passed": gc.passed, "checked": len(gc.entries),
                 "skipped": 0, "failures": len(gc.failed_layers)})
    for r in rows:
        print(f"{r['check']:<22} {'PASS' if r['passed'] else 'FAIL'}  "
              f"checked={r['checked']} skipped={r['skipped']}")
    print(f"grad_check max relative error {gc.max_error:.3g}")
    if args.report:
        _write_rows(rows, args.report)
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser():
    p = _Parser(prog="vmpseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic shape dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")
    sp.add_argument("--val")
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "Dice and average predictive variance on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)

    sp = add("attack", cmd_attack, "noise / FGSM / PGD robustness sweep")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", choices=robustness.KINDS, required=True)
    sp.add_argument("--snr-db", type=float, nargs="+")
    sp.add_argument("--eps", type=float, nargs="+")
    sp.add_argument("--source", type=int)
    sp.add_argument("--target", type=int)
    sp.add_argument("--steps", type=int, default=robustness.MAX_PGD_STEPS)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--report", required=True)

    sp = add("maps", cmd_maps, "write segmentation and uncertainty PGMs for one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--unc-norm", choices=("fixed", "per-image"), default="per-image")
    sp.add_argument("--unc-vmax", type=float)

    sp = add("verify", cmd_verify, "run the Monte Carlo oracle suite and a gradient check")
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--grad-params", type=int, default=200)
    sp.add_argument("--report")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args) or EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError,
            unet.ConfigError, checkpoint.CheckpointError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
