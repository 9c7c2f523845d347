"""Two-phase training: phase 1 trains the coupled student/teacher pair and
emits uncertainty maps, phase 2 retrains with those maps weighting the
consistency term. Ablation flags select the baseline, MT, CEMT and UG-CEMT
variants as well as pseudo-label (PLG) and supervised-only training.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics
from .backbone import build_backbone, decode, encode
from .config import TrainConfig, to_text
from .cross_attention import AttentionParams, TokenizedFeatures, cross_attention_block, init_attention_params
from .data import Dataset, crop_slices
from .errors import DataError, NumericError
from .losses import consistency_loss, pseudo_label_loss, supervised_loss, total_objective
from .sam import SamState, current_lr, sam_step
from .storage import save_checkpoint, save_ugm
from .teacher import TeacherState, ewa_update, init_teacher
from .uncertainty import build_ugm, max_entropy, mc_forward, mean_and_entropy, mean_entropy

log = logging.getLogger(__name__)

_PURPOSE = {"data": 11, "crop": 12, "dropout_s": 13, "dropout_t": 14, "noise": 15, "mc": 16, "ugm": 17}

LOSS_COLUMNS = ["step", "supervised", "consistency", "lambda", "total", "phase", "disparity", "lr"]
METRIC_COLUMNS = ["phase", "step", "Dice", "Jaccard", "95HD", "ASD", "disparity"]


def seed_for(base: int, purpose: str, phase: int = 0, step: int = 0, extra: int = 0) -> int:
    ss = np.random.SeedSequence([int(base), _PURPOSE[purpose], int(phase), int(step), int(extra)])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainState:
    student: dict
    teacher: TeacherState
    opt: SamState = field(default_factory=SamState)
    step: int = 0
    phase: int = 1


def build_student(cfg: TrainConfig) -> dict:
    params = build_backbone(cfg.net, cfg.seeds.init)
    params.update(init_attention_params(cfg.net.bottleneck_channels, seed_for(cfg.seeds.init, "ugm", extra=1)))
    return params


def init_state(cfg: TrainConfig) -> TrainState:
    student = build_student(cfg)
    return TrainState(student, init_teacher(student, cfg.ewa_beta), SamState(), 0, 1)


@dataclass
class Batch:
    ids_l: list
    x_l: torch.Tensor
    y_l: torch.Tensor
    ids_u: list
    x_u: torch.Tensor
    w_u: torch.Tensor | None = None
    w_l: torch.Tensor | None = None
    h_u: torch.Tensor | None = None  # normalised entropy crops, for uncertainty-scaled noise


def sample_batch(ds: Dataset, cfg: TrainConfig, phase: int, step: int, ugms: dict | None = None) -> Batch:
    rng = np.random.default_rng(seed_for(cfg.seeds.train, "data", phase, step))
    pool_u = ds.unlabeled or ds.labeled
    idx_l = rng.choice(len(ds.labeled), cfg.labeled_bs, replace=len(ds.labeled) < cfg.labeled_bs)
    idx_u = rng.choice(len(pool_u), cfg.unlabeled_bs, replace=len(pool_u) < cfg.unlabeled_bs)
    xs, ys, wl, ids_l = [], [], [], []
    for j, i in enumerate(idx_l):
        c = ds.labeled[i]
        sl = crop_slices(c.volume.shape, cfg.patch_size,
                         np.random.default_rng(seed_for(cfg.seeds.train, "crop", phase, step, j)), c.label, cfg.fg_bias)
        xs.append(c.volume[sl])
        ys.append(c.label[sl])
        ids_l.append(c.id)
        if ugms is not None and cfg.ugm_weight_supervised:
            if c.id not in ugms:
                raise DataError(f"no uncertainty map for labeled volume {c.id}")
            wl.append(ugms[c.id].weight.numpy()[sl])
    xu, wu, hu, ids_u = [], [], [], []
    for j, i in enumerate(idx_u):
        c = pool_u[i]
        # unlabeled crops are never steered by the (hidden) label
        sl = crop_slices(c.volume.shape, cfg.patch_size,
                         np.random.default_rng(seed_for(cfg.seeds.train, "crop", phase, step, 100 + j)))
        xu.append(c.volume[sl])
        ids_u.append(c.id)
        if ugms is not None:
            if c.id not in ugms:
                raise DataError(f"no uncertainty map for sampled volume {c.id}")
            u = ugms[c.id]
            wu.append(u.weight.numpy()[sl])
            hu.append(u.entropy.numpy()[sl] / max_entropy(cfg.net.num_classes))
    t = lambda arrs: torch.from_numpy(np.stack(arrs))
    return Batch(ids_l, t(xs)[:, None].float(), t(ys).long(), ids_u, t(xu)[:, None].float(),
                 w_u=t(wu).float() if wu else None, w_l=t(wl).float() if wl else None,
                 h_u=t(hu).float() if hu else None)


def perturb_input(x, sigma, seed: int):
    """x + N(0, sigma^2) noise; ``sigma`` may be a scalar or a per-voxel array."""
    x = torch.as_tensor(x)
    if not torch.is_tensor(sigma) and np.isscalar(sigma):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        if sigma == 0:
            return x.clone()
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
    return x + torch.as_tensor(sigma, dtype=x.dtype) * noise


def _fg(probs_or_logits: torch.Tensor) -> torch.Tensor:
    return probs_or_logits.argmax(dim=1) > 0


def batch_disparity(a: torch.Tensor, b: torch.Tensor) -> float:
    """1 - Jaccard between two boolean foreground masks (both empty -> 0)."""
    union = (a | b).sum().item()
    return 0.0 if union == 0 else 1.0 - (a & b).sum().item() / union


def _attention(params: dict) -> AttentionParams:
    return AttentionParams.from_paramset(params)


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig, phase_weights: bool = False):
    """One optimisation step. Returns (new_state, LossBreakdown, aux dict)."""
    ab, spec, phase, t = cfg.ablation, cfg.net, state.phase, state.step
    base = cfg.seeds.train
    nl = batch.x_l.shape[0]
    s_seed = seed_for(base, "dropout_s", phase, t)
    t_seed = seed_for(base, "dropout_t", phase, t)
    use_teacher = ab.mode != "SUP"
    teacher_p = state.teacher.params

    if use_teacher:
        x = torch.cat([batch.x_l, batch.x_u])
        if cfg.ugm_samples and batch.h_u is not None:
            sig = torch.cat([torch.full_like(batch.x_l, cfg.noise_sigma), cfg.noise_sigma * batch.h_u[:, None]])
        else:
            sig = cfg.noise_sigma
        x_t = perturb_input(x, sig, seed_for(base, "noise", phase, t))
        with torch.no_grad():
            gen_t = torch.Generator().manual_seed(t_seed)
            skips_t, bott_t = encode(teacher_p, x_t, spec, True, gen_t)
            gen_state_t = gen_t.get_state()
        weight = None
        if ab.mode == "CR" and ab.use_ugm:
            if phase_weights and not cfg.ugm_recompute:
                if batch.w_u is None:
                    raise DataError("phase-2 step needs persisted uncertainty maps")
                weight = batch.w_u
            elif cfg.ugm_per_step if phase == 1 else cfg.ugm_recompute:
                mc = mc_forward(teacher_p, x_t[nl:], spec, cfg.T_mc, seed_for(base, "mc", phase, t))
                weight = mean_and_entropy(mc).weight
    else:
        x = batch.x_l

    batch_sup_weight = batch.w_l if cfg.ugm_weight_supervised else None
    aux = {}

    def loss_eval(params):
        p = {k: v.detach().requires_grad_(True) for k, v in params.items()}
        if use_teacher:
            gen_s = torch.Generator().manual_seed(s_seed)
            skips_s, bott_s = encode(p, x, spec, True, gen_s)
            bott_t_used = bott_t
            if ab.use_ca:
                xs, xt = cross_attention_block(TokenizedFeatures.from_feature_map(bott_s),
                                               TokenizedFeatures.from_feature_map(bott_t), _attention(p))
                bott_s = xs.to_feature_map()
                bott_t_used = xt.to_feature_map().detach()
            logits_s = decode(p, skips_s, bott_s, spec, True, gen_s)
            with torch.no_grad():
                gen_t2 = torch.Generator()
                gen_t2.set_state(gen_state_t)
                logits_t = decode(teacher_p, skips_t, bott_t_used, spec, True, gen_t2)
            sup = supervised_loss(logits_s[:nl], batch.y_l, batch_sup_weight)
            prob_s = torch.softmax(logits_s[nl:], dim=1)
            prob_t = torch.softmax(logits_t[nl:], dim=1)
            if ab.mode == "CR":
                cons = consistency_loss(prob_s, prob_t, weight)
            else:
                cons = pseudo_label_loss(logits_s[nl:], prob_t)
            if not aux:
                aux["disparity"] = batch_disparity(_fg(prob_s.detach()), _fg(prob_t))
        else:
            gen_s = torch.Generator().manual_seed(s_seed)
            skips_s, bott_s = encode(p, x, spec, True, gen_s)
            logits_s = decode(p, skips_s, bott_s, spec, True, gen_s)
            sup = supervised_loss(logits_s, batch.y_l, batch_sup_weight)
            cons = torch.zeros((), dtype=sup.dtype)
            aux.setdefault("disparity", float("nan"))
        lb = total_objective(sup, cons, t, cfg.t_max)
        names = list(p)
        grads = torch.autograd.grad(lb.total, [p[k] for k in names], allow_unused=True)
        g = {k: (torch.zeros_like(p[k]) if gr is None else gr) for k, gr in zip(names, grads)}
        return lb, g

    lr = current_lr(cfg.sam, state.opt.step)
    new_student, new_opt = sam_step(loss_eval, state.opt, state.student, cfg.sam)
    if ab.use_ewa:
        new_teacher = ewa_update(state.teacher, new_student)
    else:
        new_teacher = TeacherState({k: v.detach().clone() for k, v in new_student.items()},
                                   state.teacher.beta, state.teacher.steps_seen + 1)
    aux["lr"] = lr
    lb = new_opt.last_loss.as_floats()
    return TrainState(new_student, new_teacher, new_opt, t + 1, phase), lb, aux


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    reports: list
    aggregate: metrics.MetricReport
    disparity: float


@torch.no_grad()
def predict(state: TrainState, volume, cfg: TrainConfig):
    """Dropout-off (student_labels, teacher_labels) integer maps for one volume."""
    x = torch.as_tensor(np.asarray(volume, dtype=np.float32))[None, None]
    spec = cfg.net
    skips_s, bott_s = encode(state.student, x, spec, False)
    skips_t, bott_t = encode(state.teacher.params, x, spec, False)
    if cfg.ablation.use_ca:
        xs, xt = cross_attention_block(TokenizedFeatures.from_feature_map(bott_s),
                                       TokenizedFeatures.from_feature_map(bott_t), _attention(state.student))
        bott_s, bott_t = xs.to_feature_map(), xt.to_feature_map()
    ls = decode(state.student, skips_s, bott_s, spec, False)
    lt = decode(state.teacher.params, skips_t, bott_t, spec, False)
    return ls.argmax(1)[0].numpy(), lt.argmax(1)[0].numpy()


def _case_report(pred, gt, spacing, case_id, num_classes):
    if num_classes == 2:
        return metrics.evaluate_case(pred == 1, gt == 1, spacing, case_id)
    per = [metrics.evaluate_case(pred == c, gt == c, spacing, case_id) for c in range(1, num_classes)]
    r = metrics.mean_report(per)
    return metrics.MetricReport(case_id, r.dice, r.jaccard, r.hd95, r.asd)


def evaluate(state: TrainState, cases, cfg: TrainConfig) -> EvalResult:
    """Student predictions scored against labels; disparity is student vs teacher."""
    reports, disp = [], []
    for c in cases:
        ps, pt = predict(state, c.volume, cfg)
        reports.append(_case_report(ps, c.label, c.spacing, c.id, cfg.net.num_classes))
        disp.append(metrics.disparity(ps > 0, pt > 0))
    return EvalResult(reports, metrics.mean_report(reports), float(np.mean(disp)) if disp else float("nan"))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_eval_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "Dice", "Jaccard", "95HD", "ASD"])
        for r in [*result.reports, result.aggregate]:
            w.writerow([r.case_id, _fmt(r.dice), _fmt(r.jaccard), _fmt(r.hd95), _fmt(r.asd)])


# -- phase drivers -----------------------------------------------------------


@dataclass
class PhaseResult:
    state: TrainState
    ugms: dict = field(default_factory=dict)
    entropy_before: float = float("nan")
    entropy_after: float = float("nan")
    losses: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)


class _Logs:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.loss_fh = self.metric_fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def _open(self, name, columns):
        path = os.path.join(self.out_dir, name)
        new = not os.path.exists(path)
        fh = open(path, "a", newline="")
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        return fh, w

    def loss(self, row):
        if not self.out_dir:
            return
        if self.loss_fh is None:
            self.loss_fh, self.loss_w = self._open("loss_log.csv", LOSS_COLUMNS)
        self.loss_w.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])

    def metric(self, row):
        if not self.out_dir:
            return
        if self.metric_fh is None:
            self.metric_fh, self.metric_w = self._open("metrics_log.csv", METRIC_COLUMNS)
        self.metric_w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        self.metric_fh.flush()

    def close(self):
        for fh in (self.loss_fh, self.metric_fh):
            if fh is not None:
                fh.close()


def _train_loop(state: TrainState, ds: Dataset, cfg: TrainConfig, ugms: dict | None, out_dir, test) -> PhaseResult:
    res = PhaseResult(state)
    logs = _Logs(out_dir)
    phase = state.phase
    try:
        while state.step < cfg.t_max:
            batch = sample_batch(ds, cfg, phase, state.step, ugms)
            try:
                state, lb, aux = train_step(state, batch, cfg, phase_weights=ugms is not None)
            except NumericError as exc:
                dump = {"phase": phase, "step": state.step, "labeled_ids": batch.ids_l,
                        "unlabeled_ids": batch.ids_u, "error": str(exc)}
                if out_dir:
                    with open(os.path.join(out_dir, "divergence_dump.json"), "w") as fh:
                        json.dump(dump, fh, indent=2)
                raise NumericError(f"training diverged at phase {phase} step {dump['step']} "
                                   f"(batch {batch.ids_l + batch.ids_u}): {exc}") from exc
            row = {"step": state.step - 1, "supervised": lb.supervised, "consistency": lb.consistency,
                   "lambda": lb.lambda_t, "total": lb.total, "phase": phase,
                   "disparity": aux["disparity"], "lr": aux["lr"]}
            res.losses.append(row)
            logs.loss(row)
            if cfg.eval_every and test and (state.step % cfg.eval_every == 0 or state.step == cfg.t_max):
                ev = evaluate(state, test, cfg)
                a = ev.aggregate
                mrow = {"phase": phase, "step": state.step, "Dice": a.dice, "Jaccard": a.jaccard,
                        "95HD": a.hd95, "ASD": a.asd, "disparity": ev.disparity}
                res.eval_history.append(mrow)
                logs.metric(mrow)
    finally:
        logs.close()
    res.state = state
    return res


def _ugm_seed(cfg) -> int:
    return seed_for(cfg.seeds.train, "ugm")


def needs_maps(cfg: TrainConfig) -> bool:
    """Phase 2 of this configuration consumes persisted uncertainty maps."""
    return cfg.ablation.mode == "CR" and cfg.ablation.use_ugm


def run_phase1(cfg: TrainConfig, ds: Dataset, out_dir=None, test=None, measure_entropy: bool = True) -> PhaseResult:
    cfg.validate()
    state = init_state(cfg)
    before = float("nan")
    if measure_entropy and ds.unlabeled:
        before = mean_entropy(build_ugm(state.teacher.params, ds.unlabeled, cfg.net, cfg.T_mc, _ugm_seed(cfg)))
    res = _train_loop(state, ds, cfg, None, out_dir, test)
    ugm_list = []
    if needs_maps(cfg) or measure_entropy:
        targets = list(ds.unlabeled)
        if cfg.ugm_weight_supervised:
            targets = list(ds.labeled) + targets
        ugm_list = build_ugm(res.state.teacher.params, targets, cfg.net, cfg.T_mc, _ugm_seed(cfg))
    res.ugms = {u.source_id: u for u in ugm_list}
    res.entropy_before = before
    if measure_entropy and ds.unlabeled:
        res.entropy_after = mean_entropy([res.ugms[c.id] for c in ds.unlabeled])
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "phase1"), res.state.student, res.state.teacher,
                        res.state.opt, res.state.step, 1)
        os.makedirs(os.path.join(out_dir, "ugm"), exist_ok=True)
        for u in ugm_list:
            save_ugm(u, os.path.join(out_dir, "ugm", f"{u.source_id}.ugm"))
        with open(os.path.join(out_dir, "entropy.txt"), "w") as fh:
            fh.write(f"before={before!r}\nafter={res.entropy_after!r}\n")
    return res


def run_phase2(cfg: TrainConfig, ds: Dataset, phase1_state: TrainState, ugms: dict | None,
               out_dir=None, test=None) -> PhaseResult:
    """Retrain from phase-1 weights (or from scratch with ``phase2_cold_start``)
    with a fresh optimiser and a restarted ramp-up."""
    cfg.validate()
    use_maps = needs_maps(cfg)
    if use_maps:
        missing = [c.id for c in ds.unlabeled if not ugms or c.id not in ugms]
        if missing:
            raise DataError(f"uncertainty maps missing for {len(missing)} unlabeled volumes, e.g. {missing[0]}")
    if cfg.phase2_cold_start:
        student = build_student(cfg)
        teacher = init_teacher(student, cfg.ewa_beta)
    else:
        student = {k: v.clone() for k, v in phase1_state.student.items()}
        teacher = TeacherState({k: v.clone() for k, v in phase1_state.teacher.params.items()},
                               phase1_state.teacher.beta, phase1_state.teacher.steps_seen)
    state = TrainState(student, teacher, SamState(), 0, 2)
    res = _train_loop(state, ds, cfg, ugms if use_maps else None, out_dir, test)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final"), res.state.student, res.state.teacher,
                        res.state.opt, res.state.step, 2)
    return res


@dataclass
class RunResult:
    phase1: PhaseResult
    phase2: PhaseResult | None
    final: TrainState


def run(cfg: TrainConfig, ds: Dataset, out_dir=None, test=None, phases: str = "both",
        measure_entropy: bool = True) -> RunResult:
    """``phases``: "1", "2" is not standalone here (see the CLI), "both" runs 1 then 2."""
    cfg.validate()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.resolved.txt"), "w") as fh:
            fh.write(to_text(cfg))
    p1 = run_phase1(cfg, ds, out_dir, test, measure_entropy)
    p2 = None
    if phases == "both" and (ds.unlabeled or not cfg.ablation.use_ugm):
        p2 = run_phase2(cfg, ds, p1.state, p1.ugms, out_dir, test)
    elif out_dir:
        save_checkpoint(os.path.join(out_dir, "final"), p1.state.student, p1.state.teacher,
                        p1.state.opt, p1.state.step, 1)
    return RunResult(p1, p2, (p2 or p1).state)


def state_from_checkpoint(loaded) -> TrainState:
    student, teacher, opt, step, phase = loaded
    return TrainState(student, teacher, opt, step, phase)


def replace_cfg(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, **kw)
