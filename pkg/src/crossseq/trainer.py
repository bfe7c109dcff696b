"""Training, evaluation, checkpointing and ablation runs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import metrics as M_
from .cfd import decomposition_loss
from .config import ExperimentConfig, config_hash, from_dict, to_dict
from .data import (DatasetSplit, SlicePair, SubjectVolumes, list_subjects, load_subject, phantom_cohort,
                   split_dataset, subject_slices)
from .losses import NonFiniteLossError, consistency_weight, supervised_loss, total_loss
from .model import CrossSeqNet
from .ssl import CSEAuditLog, cse_consistency_loss, ema_update, make_teacher, ramped_score, score_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "crossseq-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    epoch: int                       # number of completed epochs
    student: dict
    teacher: dict
    optimizer: dict
    rng: dict
    history: List[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    student: CrossSeqNet
    teacher: CrossSeqNet
    split: DatasetSplit
    steps: List[dict]
    epochs: List[dict]


# ---------------------------------------------------------------------------
# model / data construction


def build_model(cfg: ExperimentConfig) -> CrossSeqNet:
    return CrossSeqNet(cfg.lcsc_t1, cfg.lcsc_fa, cfg.segnet, use_cfd=cfg.use_cfd, input_combo=cfg.input_combo)


def load_cohort(cfg: ExperimentConfig) -> List[SubjectVolumes]:
    d = cfg.data
    if d.source == "phantom":
        return phantom_cohort(d.n_subjects, seed=cfg.seed, config=d.phantom)
    return [load_subject(p) for p in list_subjects(d.path)]


def build_split(cfg: ExperimentConfig, cohort: Optional[Sequence[SubjectVolumes]] = None) -> DatasetSplit:
    cohort = cohort if cohort is not None else load_cohort(cfg)
    split = split_dataset(cohort, cfg.data.labeled_fraction, seed=cfg.seed, n_test=cfg.data.n_test,
                          axis=cfg.data.axis)
    if not cfg.use_unlabeled:
        split.unlabeled = []
    return split


def _to_tensor(arrs, dtype=torch.float32):
    return torch.as_tensor(np.stack(arrs)[:, None], dtype=dtype)


def _augment(rng: np.random.Generator, t1, fa, label=None):
    """Horizontal flip shared by all maps; independent ±10% brightness/contrast jitter on images."""
    if rng.random() < 0.5:
        t1, fa = t1[:, ::-1], fa[:, ::-1]
        if label is not None:
            label = label[:, ::-1]
    out = []
    for x in (t1, fa):
        c, b = rng.uniform(0.9, 1.1, size=2)
        m = x.mean()
        out.append((x - m) * c + m * b)
    return out[0], out[1], label


def _batch(pairs: Sequence[SlicePair], idx, rng, augment: bool, labeled: bool):
    t1s, fas, ys = [], [], []
    for i in idx:
        p = pairs[i]
        t1, fa, y = p.t1, p.fa, p.label
        if augment:
            t1, fa, y = _augment(rng, t1, fa, y)
        t1s.append(np.ascontiguousarray(t1))
        fas.append(np.ascontiguousarray(fa))
        if labeled:
            ys.append(np.ascontiguousarray(y))
    y = _to_tensor(ys) if labeled else None
    return _to_tensor(t1s), _to_tensor(fas), y


def _cycled(rng, n, count):
    reps = math.ceil(count / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": torch_gen.get_state(),
            "torch_global": torch.get_rng_state()}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": to_dict(ckpt.config),
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "student": ckpt.student,
        "teacher": ckpt.teacher,
        "optimizer": ckpt.optimizer,
        "rng": ckpt.rng,
        "history": ckpt.history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: Optional[ExperimentConfig] = None, force: bool = False) -> Checkpoint:
    """Load a checkpoint, refusing on a format/version or config-hash mismatch unless ``force``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = from_dict(payload["config"])
    stored = payload["config_hash"]
    problems = []
    if config_hash(cfg) != stored:
        problems.append(f"stored config does not match its hash {stored}")
    if expected is not None and config_hash(expected) != stored:
        problems.append(f"config hash {config_hash(expected)} differs from checkpoint {stored}")
    if problems and not force:
        raise CheckpointError("; ".join(problems) + " (use force to override)")
    for p in problems:
        log.warning("loading anyway: %s", p)
    return Checkpoint(cfg, payload["epoch"], payload["student"], payload["teacher"], payload["optimizer"],
                      payload["rng"], payload.get("history", []))


def _state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training


def _dcp(cfg, forwards):
    """Mean per-sample decomposition loss over the given forward passes."""
    decs = [(f.dec_t1, f.dec_fa) for f in forwards if f is not None and f.dec_t1 is not None]
    if not decs or not cfg.use_dcp or cfg.weights.beta == 0:
        return torch.zeros(())
    terms = [
        decomposition_loss(d1.codes[i], d2.codes[i], d1.nonunique[i], d2.nonunique[i], cfg.epsilon)
        for d1, d2 in decs
        for i in range(d1.codes.shape[0])
    ]
    return torch.stack(terms).mean()


def _write_csv(rows: List[dict], path: Path):
    if not rows:
        return
    keys = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def train(cfg: ExperimentConfig, out_dir=None, split: Optional[DatasetSplit] = None,
          resume: Optional[Checkpoint] = None, stop_after: Optional[int] = None,
          plots: bool = True) -> TrainResult:
    """Optimize the student on the full objective and track the EMA teacher.

    ``stop_after`` ends the run after that many completed epochs (the saved
    checkpoint can be resumed). Logs, CSE audit files, checkpoints and plots go to
    ``out_dir`` when given.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        from .config import save_config

        save_config(cfg, out / "config.yaml")

    split = split if split is not None else build_split(cfg)
    if not split.labeled:
        raise TrainingAborted("no labeled slices to train on")
    if out is not None:
        split.write_manifest(out / "split.jsonl")

    torch.manual_seed(cfg.seed)
    student = build_model(cfg)
    teacher = make_teacher(student)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    np_rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: List[dict] = []
    start_epoch = 0

    if resume is not None:
        if config_hash(resume.config) != config_hash(cfg):
            raise CheckpointError("resume checkpoint was produced by a different config")
        student.load_state_dict(resume.student)
        teacher.load_state_dict(resume.teacher)
        opt.load_state_dict(resume.optimizer)
        np_rng.bit_generator.state = resume.rng["numpy"]
        gen.set_state(resume.rng["torch"])
        torch.set_rng_state(resume.rng["torch_global"])
        history = list(resume.history)
        start_epoch = resume.epoch

    n_l, n_u = len(split.labeled), len(split.unlabeled)
    steps_per_epoch = cfg.steps_per_epoch or max(
        math.ceil(n_l / cfg.batch_labeled), math.ceil(n_u / cfg.batch_unlabeled) if n_u else 0)
    scoring = cfg.use_cse and cfg.M >= 2
    audit = CSEAuditLog(out / "cse" if out is not None and scoring else None)
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    step_rows = [r for r in history if r.get("kind") == "step"]
    epoch_rows = [r for r in history if r.get("kind") == "epoch"]
    ckpt = None

    for epoch in range(start_epoch, end_epoch):
        t0 = time.time()
        student.train()
        lab_idx = _cycled(np_rng, n_l, steps_per_epoch * cfg.batch_labeled)
        unl_idx = _cycled(np_rng, n_u, steps_per_epoch * cfg.batch_unlabeled) if n_u else None
        w_cons = consistency_weight(epoch, cfg.weights)
        for step in range(steps_per_epoch):
            li = lab_idx[step * cfg.batch_labeled:(step + 1) * cfg.batch_labeled]
            t1_l, fa_l, y = _batch(split.labeled, li, np_rng, cfg.augment, labeled=True)
            if n_u:
                ui = unl_idx[step * cfg.batch_unlabeled:(step + 1) * cfg.batch_unlabeled]
                t1_u, fa_u, _ = _batch(split.unlabeled, ui, np_rng, cfg.augment, labeled=False)
            else:
                ui = []

            # labeled and unlabeled halves go through separately so batch-norm
            # statistics of the supervised pass are not mixed with unlabeled slices
            fwd_l = student(t1_l, fa_l)
            fwd_u = student(t1_u, fa_u) if n_u else None
            sup = supervised_loss(fwd_l.pred, y)
            dcp = _dcp(cfg, [fwd_l, fwd_u] if cfg.dcp_on_unlabeled else [fwd_l])

            cons = torch.zeros(())
            n_acc = 0
            if n_u:
                accepted = torch.ones(len(ui), dtype=torch.bool)
                if scoring:
                    _, _, inc, ps, pt = score_batch(t1_u, fa_u, cfg.M, student, teacher, generator=gen)
                    ramped = ramped_score(inc, epoch, cfg.epochs)
                    accepted = ramped < cfg.threshold
                    audit.record(epoch, [split.unlabeled[i].subject for i in ui],
                                 [split.unlabeled[i].slice_index for i in ui], inc, ramped, accepted)
                if cfg.use_cse and cfg.cse_input == "noisy":
                    noise = torch.randn(t1_u.shape, generator=gen) * 0.1
                    noise_fa = torch.randn(fa_u.shape, generator=gen) * 0.1
                    s_probs = student(t1_u + noise, fa_u + noise_fa).pred.probs
                    with torch.no_grad():
                        t_probs = teacher(t1_u + noise, fa_u + noise_fa).pred.probs
                else:
                    s_probs = fwd_u.pred.probs
                    with torch.no_grad():
                        t_probs = teacher(t1_u, fa_u).pred.probs
                cons = cse_consistency_loss(s_probs, t_probs, accepted)
                n_acc = int(accepted.sum())

            try:
                loss = total_loss(sup, cons, dcp, epoch, cfg.weights)
            except NonFiniteLossError as exc:
                ids = [(split.labeled[i].subject, split.labeled[i].slice_index) for i in li]
                ids += [(split.unlabeled[i].subject, split.unlabeled[i].slice_index) for i in ui]
                if out is not None:
                    (out / "abort_batch.json").write_text(json.dumps({"epoch": epoch, "step": step,
                                                                      "error": str(exc), "batch": ids}))
                raise TrainingAborted(f"epoch {epoch} step {step}: {exc}; batch {ids}") from exc

            opt.zero_grad(set_to_none=True)
            loss.backward()
            before = _state_hash(teacher) if cfg.audit_teacher else None
            opt.step()
            student.clamp_()
            if before is not None and _state_hash(teacher) != before:
                raise TrainingAborted("optimizer modified teacher parameters")
            ema_update(teacher, student, cfg.gamma)

            row = {"kind": "step", "epoch": epoch, "step": step, "sup": float(sup.detach()), "dcp": float(dcp.detach()),
                   "cons": float(cons.detach()), "cons_weight": w_cons, "total": float(loss.detach()),
                   "accepted": n_acc, "scored": len(ui)}
            step_rows.append(row)
            history.append(row)

        summary = {"kind": "epoch", "epoch": epoch}
        rows = [r for r in step_rows if r["epoch"] == epoch]
        for key in ("sup", "dcp", "cons", "total"):
            summary[key] = float(np.mean([r[key] for r in rows]))
        scored = sum(r["scored"] for r in rows)
        summary["accept_rate"] = sum(r["accepted"] for r in rows) / scored if scored else float("nan")
        summary["seconds"] = time.time() - t0
        epoch_rows.append(summary)
        history.append(summary)
        log.info("epoch %d: total=%.4f sup=%.4f dcp=%.4f cons=%.5f accept=%.2f", epoch, summary["total"],
                 summary["sup"], summary["dcp"], summary["cons"], summary["accept_rate"])
        audit.flush(epoch)

        ckpt = Checkpoint(cfg, epoch + 1, _cpu_state(student), _cpu_state(teacher), _clone(opt.state_dict()),
                          _rng_state(np_rng, gen), list(history))
        if out is not None:
            save_checkpoint(ckpt, out / "checkpoint.pt")

    if ckpt is None:  # nothing left to run
        ckpt = Checkpoint(cfg, start_epoch, _cpu_state(student), _cpu_state(teacher), _clone(opt.state_dict()),
                          _rng_state(np_rng, gen), list(history))
    if out is not None:
        _write_csv(step_rows, out / "log_steps.csv")
        _write_csv(epoch_rows, out / "log_epochs.csv")
        if plots:
            from .plotting import plot_training_curves

            plot_training_curves(epoch_rows, out / "loss_curves.png")
    return TrainResult(ckpt, student, teacher, split, step_rows, epoch_rows)


def _cpu_state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _clone(obj):
    if torch.is_tensor(obj):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# evaluation


def model_from_checkpoint(ckpt: Checkpoint, which: Optional[str] = None) -> CrossSeqNet:
    which = which or ckpt.config.eval_model
    net = build_model(ckpt.config)
    net.load_state_dict(ckpt.teacher if which == "teacher" else ckpt.student)
    net.eval()
    return net


@torch.no_grad()
def predict_probabilities(net: CrossSeqNet, subject: SubjectVolumes, axis: int = -1) -> np.ndarray:
    """Foreground probability volume, predicted slice by slice and re-stacked along ``axis``."""
    net.eval()
    pairs = subject_slices(subject, axis, with_label=False)
    dtype = next(net.parameters()).dtype
    probs = net.probs(_to_tensor([p.t1 for p in pairs], dtype), _to_tensor([p.fa for p in pairs], dtype))
    return np.stack(list(probs[:, 0].cpu().numpy()), axis=axis % 3)


def evaluate(checkpoint, subjects: Sequence, threshold: Optional[float] = None, which: Optional[str] = None,
             errors: Optional[Dict[str, str]] = None) -> List[M_.MetricResult]:
    """Per-subject DSC / HD95 / ASD on 3D volumes stacked from 2D predictions.

    ``checkpoint`` is a :class:`Checkpoint`, a path, or a network. ``subjects``
    holds :class:`SubjectVolumes` or subject directories; subjects that fail to
    load are skipped and reported through ``errors``.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        net = model_from_checkpoint(checkpoint, which)
        cfg = checkpoint.config
        thr = cfg.binarize_threshold if threshold is None else threshold
        axis = cfg.data.axis
    else:
        net, thr, axis = checkpoint, 0.5 if threshold is None else threshold, -1
    errors = errors if errors is not None else {}
    results = []
    for s in subjects:
        try:
            subj = s if isinstance(s, SubjectVolumes) else load_subject(s, require_label=True)
            if subj.label is None:
                raise EvaluationError(f"{subj.subject}: no ground-truth label")
        except (OSError, ValueError, EvaluationError) as exc:
            name = getattr(s, "subject", None) or Path(s).name
            errors[name] = str(exc)
            log.warning("skipping %s: %s", name, exc)
            continue
        probs = predict_probabilities(net, subj, axis)
        pred = (probs >= thr).astype(np.uint8)
        results.append(M_.evaluate_masks(pred, subj.label.voxels, subj.label.spacing, subject=subj.subject))
    return results


# ---------------------------------------------------------------------------
# ablations

ABLATION_AXES = ("M", "thres", "alpha_beta", "components", "input_combo")

COMPONENTS = {
    "Model 1": {"use_dcp": False, "use_cse": False},
    "Model 2": {"use_dcp": True, "use_cse": False},
    "Model 3": {"use_dcp": False, "use_cse": True},
    "ours": {"use_dcp": True, "use_cse": True},
}


def ablation_variants(base: ExperimentConfig, axis: str, values: Sequence) -> List[Tuple[str, ExperimentConfig]]:
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    out = []
    if axis == "components":
        names = list(values) if values else list(COMPONENTS)
        for name in names:
            key = _component_key(name)
            out.append((key, base.replace(**COMPONENTS[key])))
        return out
    for v in values:
        if axis == "M":
            out.append((f"M={int(v)}", base.replace(M=int(v))))
        elif axis == "thres":
            out.append((f"thres={float(v):g}", base.replace(threshold=float(v))))
        elif axis == "alpha_beta":
            a, b = (float(x) for x in str(v).split(":"))
            out.append((f"a={a:g},b={b:g}", base.replace(**{"weights.alpha": a, "weights.beta": b})))
        elif axis == "input_combo":
            out.append((str(v), base.replace(input_combo=str(v))))
    return out


def _component_key(name: str) -> str:
    norm = str(name).lower().replace(" ", "").replace("_", "")
    for key in COMPONENTS:
        if key.lower().replace(" ", "") == norm:
            return key
    if norm in ("1", "2", "3"):
        return f"Model {norm}"
    raise ValueError(f"unknown component variant {name!r}; choose from {list(COMPONENTS)}")


@dataclass
class AblationTable:
    axis: str
    rows: List[Tuple[str, List[M_.MetricResult]]]

    def text(self) -> str:
        label = {"M": "M", "thres": "thres", "alpha_beta": "alpha, beta", "components": "Method",
                 "input_combo": "Input"}[self.axis]
        return M_.format_summary_table(self.rows, label=label)

    def records(self) -> List[dict]:
        out = []
        for name, results in self.rows:
            s = M_.summarize(results)
            out.append({"variant": name, "dsc_mean": s["dsc"][0], "dsc_sd": s["dsc"][1],
                        "hd95_mean": s["hd95"][0], "hd95_sd": s["hd95"][1],
                        "asd_mean": s["asd"][0], "asd_sd": s["asd"][1]})
        return out


def run_ablation(base: ExperimentConfig, axis: str, values: Sequence = (), out_dir=None) -> AblationTable:
    """One training run per value with the shared seed and split; returns the comparison table."""
    variants = ablation_variants(base, axis, values)
    cohort = load_cohort(base)
    rows = []
    for name, cfg in variants:
        split = build_split(cfg, cohort)
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / name.replace(" ", "_").replace("=", "").replace(",", "_").replace("+", "_")
        res = train(cfg, sub, split=split, plots=False)
        rows.append((name, evaluate(res.checkpoint, split.test)))
    table = AblationTable(axis, rows)
    if out_dir is not None:
        out = Path(out_dir)
        _write_csv(table.records(), out / f"ablation_{axis}.csv")
        (out / f"ablation_{axis}.txt").write_text(table.text() + "\n")
        from .plotting import plot_ablation

        plot_ablation(table, out / f"ablation_{axis}.png")
    return table
