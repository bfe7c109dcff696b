"""Mean-teacher machinery and consistency-based sample enhancement (CSE)."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import SlicePair
from .losses import consistency_mse

NOISE_STD = 0.1


class CongruenceError(ValueError):
    pass


class CSEConfigError(ValueError):
    pass


@dataclass
class ConsistencyReport:
    probs_student: torch.Tensor  # (M, H, W)
    probs_teacher: torch.Tensor
    cons_student: float
    cons_teacher: float
    inconsistency: float
    accepted: Optional[bool] = None


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, gamma: float) -> nn.Module:
    """teacher <- gamma * teacher + (1 - gamma) * student, in place.

    Floating-point buffers (batch-norm statistics) follow the same average;
    integer buffers are copied.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    t_state = dict(teacher.named_parameters())
    s_state = dict(student.named_parameters())
    t_buf = dict(teacher.named_buffers())
    s_buf = dict(student.named_buffers())
    if t_state.keys() != s_state.keys() or t_buf.keys() != s_buf.keys():
        raise CongruenceError("teacher and student parameter names differ")
    for name, tp in list(t_state.items()) + list(t_buf.items()):
        sp = s_state.get(name, s_buf.get(name))
        if tp.shape != sp.shape:
            raise CongruenceError(f"{name}: teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}")
        if tp.is_floating_point():
            tp.mul_(gamma).add_(sp.detach(), alpha=1.0 - gamma)
        else:
            tp.copy_(sp)
    return teacher


def augment_with_noise(pair: SlicePair, m: int, seed: int, std: float = NOISE_STD) -> SlicePair:
    """Add independent N(0, std^2) noise to t1 and fa; keyed by (seed, m)."""
    rng = np.random.default_rng([int(seed), int(m)])
    return SlicePair(
        t1=pair.t1 + rng.normal(0.0, std, pair.t1.shape),
        fa=pair.fa + rng.normal(0.0, std, pair.fa.shape),
        label=None,
        subject=pair.subject,
        slice_index=pair.slice_index,
    )


def cons_from_probs(probs: torch.Tensor) -> torch.Tensor:
    """Prediction spread across M augmentations.

    ``probs`` has shape (M, B, ...) holding foreground probabilities. The two
    class maps (1-p, p) each get a per-pixel sample std over M, averaged over
    pixels; the class values are summed. Returns shape (B,).
    """
    if probs.shape[0] < 2:
        raise CSEConfigError("consistency needs M >= 2 augmentations")
    classes = torch.stack([1.0 - probs, probs], dim=0)  # (K, M, B, ...)
    std = classes.var(dim=1, unbiased=True).sqrt()       # (K, B, ...)
    spatial = std.flatten(start_dim=2).mean(dim=2)       # (K, B)
    return spatial.sum(dim=0)


def _eval_mode(*models):
    states = [m.training for m in models]
    for m in models:
        m.eval()
    return states


def _restore(models, states):
    for m, s in zip(models, states):
        m.train(s)


@torch.no_grad()
def score_batch(t1: torch.Tensor, fa: torch.Tensor, M: int, student: nn.Module, teacher: nn.Module,
                generator: Optional[torch.Generator] = None, std: float = NOISE_STD):
    """Consistency values for a batch (B, 1, H, W). Returns (cons_s, cons_t, inconsistency, ps, pt)."""
    if M < 2:
        raise CSEConfigError(f"M must be >= 2, got {M}")
    noise_t1 = torch.randn((M,) + tuple(t1.shape), generator=generator, dtype=t1.dtype) * std
    noise_fa = torch.randn((M,) + tuple(fa.shape), generator=generator, dtype=fa.dtype) * std
    x1 = (t1.unsqueeze(0) + noise_t1).flatten(0, 1)
    x2 = (fa.unsqueeze(0) + noise_fa).flatten(0, 1)
    states = _eval_mode(student, teacher)
    try:
        ps = student.probs(x1, x2).view(M, *t1.shape)
        pt = teacher.probs(x1, x2).view(M, *t1.shape)
    finally:
        _restore((student, teacher), states)
    cs, ct = cons_from_probs(ps), cons_from_probs(pt)
    return cs, ct, (cs - ct) ** 2, ps, pt


def consistency_scores(pair: SlicePair, M: int, student: nn.Module, teacher: nn.Module,
                       seed: int = 0) -> ConsistencyReport:
    if M < 2:
        raise CSEConfigError(f"M must be >= 2, got {M}")
    dtype = next(student.parameters()).dtype
    augmented = [augment_with_noise(pair, m, seed) for m in range(M)]
    t1 = torch.as_tensor(np.stack([a.t1 for a in augmented])[:, None], dtype=dtype)
    fa = torch.as_tensor(np.stack([a.fa for a in augmented])[:, None], dtype=dtype)
    states = _eval_mode(student, teacher)
    try:
        with torch.no_grad():
            ps = student.probs(t1, fa)[:, 0]
            pt = teacher.probs(t1, fa)[:, 0]
    finally:
        _restore((student, teacher), states)
    cs = float(cons_from_probs(ps.unsqueeze(1))[0])
    ct = float(cons_from_probs(pt.unsqueeze(1))[0])
    return ConsistencyReport(ps, pt, cs, ct, (cs - ct) ** 2)


def ramped_score(inconsistency, epoch: float, e_max: float):
    return (1.0 - epoch / e_max) * inconsistency


def cse_gate(report, epoch: float, e_max: float, threshold: float) -> bool:
    """Accept when (1 - epoch/e_max) * inconsistency < threshold."""
    if threshold <= 0:
        raise CSEConfigError("threshold must be positive")
    if not 0 <= epoch <= e_max:
        raise CSEConfigError(f"epoch {epoch} outside [0, {e_max}]")
    score = report.inconsistency if isinstance(report, ConsistencyReport) else report
    accepted = bool(ramped_score(score, epoch, e_max) < threshold)
    if isinstance(report, ConsistencyReport):
        report.accepted = accepted
    return accepted


def cse_consistency_loss(student_probs: torch.Tensor, teacher_probs: torch.Tensor,
                         accepted: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over accepted samples of the per-sample student/teacher MSE; 0 if none pass."""
    if student_probs.shape != teacher_probs.shape:
        raise ValueError("student and teacher maps differ in shape")
    if accepted is None:
        accepted = torch.ones(student_probs.shape[0], dtype=torch.bool)
    if not bool(accepted.any()):
        return student_probs.sum() * 0.0
    s, t = student_probs[accepted], teacher_probs[accepted].detach()
    per_sample = ((s - t) ** 2).flatten(start_dim=1).mean(dim=1)
    return per_sample.mean()


class CSEAuditLog:
    """Per-epoch CSV of gate decisions, one row per scored unlabeled sample."""

    fields = ["epoch", "subject", "slice", "inconsistency", "ramped_score", "accepted"]

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self.rows: List[dict] = []

    def record(self, epoch: int, subjects: Sequence[str], slices: Sequence[int],
               inconsistency, ramped, accepted):
        for s, k, inc, r, a in zip(subjects, slices, inconsistency, ramped, accepted):
            self.rows.append({"epoch": epoch, "subject": s, "slice": int(k), "inconsistency": float(inc),
                              "ramped_score": float(r), "accepted": bool(a)})

    def flush(self, epoch: int) -> Optional[Path]:
        rows = [r for r in self.rows if r["epoch"] == epoch]
        self.rows = [r for r in self.rows if r["epoch"] != epoch]
        if self.directory is None:
            return None
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"cse_epoch_{epoch:03d}.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fields)
            w.writeheader()
            w.writerows(rows)
        return path


__all__ = [
    "ConsistencyReport", "CongruenceError", "CSEConfigError", "CSEAuditLog", "augment_with_noise",
    "cons_from_probs", "consistency_mse", "consistency_scores", "cse_consistency_loss", "cse_gate",
    "ema_update", "make_teacher", "ramped_score", "score_batch",
]
