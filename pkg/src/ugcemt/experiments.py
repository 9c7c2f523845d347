"""Named training configurations and the ablation table."""
from __future__ import annotations

import os
from dataclasses import dataclass

from . import trainer
from .config import TrainConfig, with_ablation
from .data import Dataset

ROWS = {
    "SUP": dict(mode="SUP", use_ewa=False, use_ca=False, use_ugm=False),
    "Baseline": dict(mode="CR", use_ewa=False, use_ca=False, use_ugm=False),
    "MT": dict(mode="CR", use_ewa=True, use_ca=False, use_ugm=False),
    "CEMT": dict(mode="CR", use_ewa=True, use_ca=True, use_ugm=False),
    "UG-CEMT": dict(mode="CR", use_ewa=True, use_ca=True, use_ugm=True),
    "PLG": dict(mode="PLG", use_ewa=True, use_ca=True, use_ugm=False),
}
ABLATION = ("Baseline", "MT", "CEMT", "UG-CEMT")


def config_for(cfg: TrainConfig, row: str) -> TrainConfig:
    return with_ablation(cfg, **ROWS[row]).validate()


@dataclass
class RowResult:
    name: str
    dice: float
    jaccard: float
    hd95: float
    asd: float
    run: trainer.RunResult


def run_row(cfg: TrainConfig, ds: Dataset, row: str, out_dir=None, measure_entropy=False) -> RowResult:
    rc = config_for(cfg, row)
    sub = os.path.join(out_dir, row) if out_dir else None
    res = trainer.run(rc, ds, sub, ds.test, measure_entropy=measure_entropy)
    ev = trainer.evaluate(res.final, ds.test, rc)
    if sub:
        trainer.write_eval_csv(ev, os.path.join(sub, "eval.csv"))
    a = ev.aggregate
    return RowResult(row, a.dice, a.jaccard, a.hd95, a.asd, res)


def ablation_table(cfg: TrainConfig, ds: Dataset, out_dir=None, rows=ABLATION) -> list[RowResult]:
    return [run_row(cfg, ds, r, out_dir) for r in rows]


def format_table(results: list[RowResult], labeled_fraction: float) -> str:
    lines = [f"# labeled_fraction={labeled_fraction:g}", "method,Dice,Jaccard,95HD,ASD"]
    for r in results:
        lines.append(f"{r.name},{r.dice:.4f},{r.jaccard:.4f},{r.hd95:.3f},{r.asd:.3f}")
    return "\n".join(lines) + "\n"
