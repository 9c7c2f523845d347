"""Command-line entry point: ``ugcemt <gen-data|train|eval|ablate|plot> ...``.

Configuration is a flat ``key = value`` file (``--config``) plus repeated
``--set key=value`` flags; flags win over the file, the file over defaults.
Relative output paths are placed under ``$UGCEMT_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

log = logging.getLogger("ugcemt")

OUTPUT_ROOT_ENV = "UGCEMT_OUTPUT_ROOT"


def _out_path(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _overrides(items) -> dict:
    from .errors import ConfigurationError

    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _config(args):
    from .config import resolve

    text = None
    if getattr(args, "config", None):
        with open(args.config) as fh:
            text = fh.read()
    return resolve(text, _overrides(getattr(args, "set", None)))


def _dataset(data_dir, cfg):
    from .data import prepare, read_dataset

    train, test = read_dataset(data_dir)
    return prepare(train, test, cfg.labeled_fraction, cfg.seeds.split)


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, generate_synthetic, write_dataset

    spec = SyntheticSpec(n_volumes=args.n_volumes, volume_shape=tuple(args.shape), object=args.object,
                         radius_range=tuple(args.radius), noise_sigma=args.noise, seed=args.seed).validate()
    train = generate_synthetic(spec)
    test = []
    if args.n_test:
        test = generate_synthetic(SyntheticSpec(**{**spec.__dict__, "n_volumes": args.n_test,
                                                   "seed": args.seed + 1_000_003, "id_prefix": "test"}))
    out = _out_path(args.out)
    write_dataset(out, train, test)
    print(f"wrote {len(train)} training and {len(test)} test volumes to {out}")
    return 0


def cmd_train(args) -> int:
    from . import trainer
    from .config import to_text
    from .data import write_split_manifest
    from .storage import load_checkpoint, load_ugm

    cfg = _config(args)
    ds = _dataset(args.data, cfg)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.txt"), "w") as fh:
        fh.write(to_text(cfg))
    write_split_manifest(os.path.join(out, "split.txt"), [c.id for c in ds.labeled],
                         [c.id for c in ds.unlabeled], [c.id for c in ds.test])
    test = ds.test if cfg.eval_every else None
    if args.phase == "both":
        res = trainer.run(cfg, ds, out, test)
        final = res.final
    elif args.phase == "1":
        res = trainer.run_phase1(cfg, ds, out, test)
        final = res.state
    else:
        src = args.resume or out
        p1 = trainer.state_from_checkpoint(load_checkpoint(os.path.join(src, "phase1")))
        ugms = None
        if trainer.needs_maps(cfg):
            ugm_dir = os.path.join(src, "ugm")
            ugms = {}
            for name in sorted(os.listdir(ugm_dir)) if os.path.isdir(ugm_dir) else []:
                u = load_ugm(os.path.join(ugm_dir, name))
                ugms[u.source_id] = u
        final = trainer.run_phase2(cfg, ds, p1, ugms, out, test).state
    if ds.test:
        ev = trainer.evaluate(final, ds.test, cfg)
        trainer.write_eval_csv(ev, os.path.join(out, "eval.csv"))
        a = ev.aggregate
        print(f"Dice={a.dice:.4f} Jaccard={a.jaccard:.4f} 95HD={a.hd95:.3f} ASD={a.asd:.3f}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    from . import trainer
    from .config import to_text
    from .storage import load_checkpoint

    cfg = _config(args)
    ds = _dataset(args.data, cfg)
    cases = ds.test if ds.test and not args.all else ds.labeled + ds.unlabeled + ds.test
    state = trainer.state_from_checkpoint(load_checkpoint(args.checkpoint))
    ev = trainer.evaluate(state, cases, cfg)
    out = _out_path(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    trainer.write_eval_csv(ev, out)
    with open(os.path.splitext(out)[0] + ".config.resolved.txt", "w") as fh:
        fh.write(to_text(cfg))
    a = ev.aggregate
    print(f"Dice={a.dice:.4f} Jaccard={a.jaccard:.4f} 95HD={a.hd95:.3f} ASD={a.asd:.3f} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    from . import experiments
    from .config import apply, to_text

    cfg = _config(args)
    if args.labeled_fraction is not None:
        cfg = apply(cfg, {"labeled_fraction": str(args.labeled_fraction)}).validate()
    ds = _dataset(args.data, cfg)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.txt"), "w") as fh:
        fh.write(to_text(cfg))
    rows = experiments.ablation_table(cfg, ds, out)
    table = experiments.format_table(rows, cfg.labeled_fraction)
    with open(os.path.join(out, "ablation.csv"), "w") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.labels or [os.path.basename(os.path.normpath(r)) for r in args.runs]
    if len(labels) != len(args.runs):
        print("error: --labels must match --runs", file=sys.stderr)
        return 2
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)

    fig, axes = plt.subplots(1, 4, figsize=(16, 3.5))
    for run, label in zip(args.runs, labels):
        rows = _read_csv(os.path.join(run, "metrics_log.csv"))
        # phases are laid end to end on one step axis
        p1_len = max((int(r["step"]) for r in rows if r["phase"] == "1"), default=0)
        xs = [int(r["step"]) + (p1_len if r["phase"] == "2" else 0) for r in rows]
        for ax, key in zip(axes, ("Dice", "Jaccard", "95HD", "ASD")):
            ax.plot(xs, [float(r[key]) for r in rows], marker="o", label=label)
            ax.set_title(key)
            ax.set_xlabel("step")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "metrics.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for run, label in zip(args.runs, labels):
        rows = _read_csv(os.path.join(run, "loss_log.csv"))
        ax.plot(range(len(rows)), [float(r["total"]) for r in rows], lw=0.8, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "loss.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {os.path.join(out, 'metrics.png')} and {os.path.join(out, 'loss.png')}")
    return 0


def _add_config(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugcemt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-volumes", type=int, default=80)
    p.add_argument("--n-test", type=int, default=20, help="extra held-out volumes")
    p.add_argument("--shape", type=int, nargs=3, default=[48, 48, 24])
    p.add_argument("--object", choices=["sphere", "ellipsoid"], default="ellipsoid")
    p.add_argument("--radius", type=float, nargs=2, default=[5.0, 9.0])
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train phase 1, phase 2 or both")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=["1", "2", "both"], default="both")
    p.add_argument("--resume", help="run directory holding phase1/ and ugm/ (phase 2 only)")
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory, e.g. RUN/final")
    p.add_argument("--out", default="eval.csv")
    p.add_argument("--all", action="store_true", help="score every volume, not just the test split")
    _add_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run Baseline/MT/CEMT/UG-CEMT and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labeled-fraction", type=float)
    _add_config(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot metric and loss curves from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .errors import UGCEMTError

    try:
        return args.func(args)
    except (UGCEMTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
