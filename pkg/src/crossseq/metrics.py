"""3D overlap and surface-distance metrics, paired t-test, bootstrap expansion."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage, special

from .data import SequenceKind, Volume


class AssemblyError(ValueError):
    pass


@dataclass
class MetricResult:
    subject: str
    dsc: float
    hd95: float
    asd: float
    pred_empty: bool = False
    gt_empty: bool = False

    @property
    def sentinel(self) -> bool:
        return self.pred_empty != self.gt_empty


def stack_to_volume(predictions: Iterable[Tuple[int, np.ndarray]], spacing, axis: int = -1,
                    identity: str = "") -> Volume:
    """Assemble (slice_index, 2D mask) pairs into a binary label volume in index order."""
    items = sorted(predictions, key=lambda p: p[0])
    if not items:
        raise AssemblyError("no slices to stack")
    idx = [i for i, _ in items]
    expected = list(range(idx[0], idx[0] + len(idx)))
    if idx != expected:
        missing = sorted(set(expected) - set(idx)) or idx
        raise AssemblyError(f"slice indices not contiguous; missing/duplicated around {missing[:5]}")
    shapes = {m.shape for _, m in items}
    if len(shapes) != 1:
        raise AssemblyError(f"inconsistent slice shapes {shapes}")
    vox = np.stack([np.asarray(m).astype(np.uint8) for _, m in items], axis=axis % 3)
    return Volume(vox, spacing, identity, SequenceKind.LABEL)


def _as_mask(v) -> np.ndarray:
    return np.asarray(v.voxels if isinstance(v, Volume) else v).astype(bool)


def _spacing(pred, gt, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    for v in (pred, gt):
        if isinstance(v, Volume):
            return v.spacing
    return (1.0, 1.0, 1.0)


def dice(pred, gt) -> float:
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def border(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` removed by a 6-connected erosion (outside counts as background)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(pred, gt, spacing=None) -> Tuple[np.ndarray, np.ndarray]:
    """Directed border-to-border distances (mm): pred->gt and gt->pred."""
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise ValueError("surface distances are undefined for an empty mask")
    sp = _spacing(pred, gt, spacing)
    bp, bg = border(p), border(g)
    to_g = ndimage.distance_transform_edt(~bg, sampling=sp)
    to_p = ndimage.distance_transform_edt(~bp, sampling=sp)
    return to_g[bp], to_p[bg]


def diagonal_mm(shape, spacing) -> float:
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def _distance_or_sentinel(pred, gt, spacing, reduce):
    p, g = _as_mask(pred), _as_mask(gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return diagonal_mm(p.shape, _spacing(pred, gt, spacing))
    return reduce(*surface_distances(pred, gt, spacing))


def hd95(pred, gt, spacing=None) -> float:
    return _distance_or_sentinel(
        pred, gt, spacing,
        lambda a, b: float(max(np.percentile(a, 95), np.percentile(b, 95))),
    )


def asd(pred, gt, spacing=None) -> float:
    return _distance_or_sentinel(pred, gt, spacing, lambda a, b: float(np.concatenate([a, b]).mean()))


def evaluate_masks(pred, gt, spacing=None, subject: str = "") -> MetricResult:
    p, g = _as_mask(pred), _as_mask(gt)
    return MetricResult(
        subject=subject,
        dsc=dice(p, g),
        hd95=hd95(pred, gt, spacing),
        asd=asd(pred, gt, spacing),
        pred_empty=not p.any(),
        gt_empty=not g.any(),
    )


# ---------------------------------------------------------------------------
# statistics


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_ttest(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test.

    Zero-variance differences are flagged as ``degenerate``: identical inputs give
    t = 0, p = 1; a constant nonzero shift gives t = +/-inf, p = 0.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    df = n - 1
    mean = d.mean()
    sd = d.std(ddof=1)
    # relative guard: float noise on an exact constant shift is not real variance
    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean == 0 or abs(mean) <= 1e-15:
            return TTestResult(0.0, 1.0, df, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    # two-tailed p from the regularized incomplete beta: I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), p, df)


def monte_carlo_expand(scores, n_runs: int, seed: int) -> np.ndarray:
    """Bootstrap-resample rows of ``scores`` ``n_runs`` times and concatenate.

    Passing a 2-D array (subjects x methods) keeps paired scores together.
    """
    arr = np.asarray(scores, dtype=float)
    if arr.shape[0] == 0:
        raise ValueError("cannot resample an empty score list")
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    rng = np.random.default_rng(seed)
    n = arr.shape[0]
    idx = rng.integers(0, n, size=(n_runs, n)).reshape(-1)
    return arr[idx]


def summarize(results: Sequence[MetricResult]) -> dict:
    out = {}
    for key in ("dsc", "hd95", "asd"):
        vals = np.array([getattr(r, key) for r in results], dtype=float)
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
    return out


def format_summary_table(rows: Sequence[Tuple[str, Sequence[MetricResult]]], label: str = "Method") -> str:
    """Plain-text mean ± SD table with DSC / HD95 (mm) / ASD (mm) columns."""
    header = f"{label:<16}{'DSC':>18}{'HD95 (mm)':>18}{'ASD (mm)':>18}"
    lines = [header, "-" * len(header)]
    for name, results in rows:
        s = summarize(results)
        cells = "".join(f"{f'{m:.2f} ± {sd:.2f}':>18}" for m, sd in (s["dsc"], s["hd95"], s["asd"]))
        lines.append(f"{name:<16}{cells}")
    return "\n".join(lines)


def write_metric_csv(results: Sequence[MetricResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["subject", "dsc", "hd95", "asd", "pred_empty", "gt_empty"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in results:
            w.writerow({k: v for k, v in asdict(r).items() if k in fields})
    return path


def read_metric_csv(path) -> List[MetricResult]:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            out.append(MetricResult(
                subject=row["subject"], dsc=float(row["dsc"]), hd95=float(row["hd95"]), asd=float(row["asd"]),
                pred_empty=row["pred_empty"] == "True", gt_empty=row["gt_empty"] == "True",
            ))
    return out
