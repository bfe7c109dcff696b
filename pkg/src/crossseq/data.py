"""Volume I/O, slicing, normalization, subject splits and phantom generation."""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class SequenceKind(str, enum.Enum):
    T1 = "T1"
    FA = "FA"
    LABEL = "LABEL"


class DataError(ValueError):
    """Raised when a volume, pairing or split violates its invariants."""


class DimensionalityError(DataError):
    pass


class PairingError(DataError):
    pass


class SplitError(DataError):
    pass


class PhantomConfigError(DataError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float]
    identity: str = ""
    sequence: SequenceKind = SequenceKind.T1

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.sequence = SequenceKind(self.sequence)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3:
            raise DimensionalityError(f"expected a 3D volume, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.sequence is SequenceKind.LABEL:
            values = np.unique(self.voxels)
            if not np.all(np.isin(values, (0, 1))):
                raise DataError(f"label volume {self.identity!r} holds values other than 0/1: {values[:8]}")
            self.voxels = self.voxels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class SlicePair:
    t1: np.ndarray
    fa: np.ndarray
    label: Optional[np.ndarray] = None
    subject: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.t1.shape != self.fa.shape:
            raise PairingError(f"t1 {self.t1.shape} and fa {self.fa.shape} differ in shape")
        if self.label is not None and self.label.shape != self.t1.shape:
            raise PairingError(f"label {self.label.shape} does not match image {self.t1.shape}")

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class SubjectVolumes:
    """The registered (t1, fa, label) triple of one subject."""

    subject: str
    t1: Volume
    fa: Volume
    label: Optional[Volume] = None


@dataclass
class DatasetSplit:
    labeled: List[SlicePair]
    unlabeled: List[SlicePair]
    test: List[SubjectVolumes]
    seed: int
    roles: Dict[str, str] = field(default_factory=dict)

    def write_manifest(self, path) -> None:
        write_split_manifest(self.roles, path)


# ---------------------------------------------------------------------------
# I/O


def load_volume(path, sequence) -> Volume:
    """Read a NIfTI-1 file (.nii or .nii.gz); intensities are left raw."""
    path = Path(path)
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise OSError(f"cannot read NIfTI volume {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise DimensionalityError(f"{path} has {data.ndim} dimensions, expected 3")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    sequence = SequenceKind(sequence)
    if sequence is not SequenceKind.LABEL:
        data = data.astype(np.float64)
    return Volume(data, spacing, identity=_subject_from_path(path), sequence=sequence)


def save_volume(volume: Volume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag(list(volume.spacing) + [1.0])
    dtype = np.uint8 if volume.sequence is SequenceKind.LABEL else np.float32
    img = nib.Nifti1Image(volume.voxels.astype(dtype), affine)
    img.header.set_zooms(volume.spacing)
    nib.save(img, str(path))
    return path


def _subject_from_path(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    return path.parent.name or name


_FILENAMES = {SequenceKind.T1: "t1", SequenceKind.FA: "fa", SequenceKind.LABEL: "label"}


def _find_file(subject_dir: Path, stem: str) -> Optional[Path]:
    for ext in (".nii.gz", ".nii"):
        candidate = subject_dir / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    return None


def load_subject(subject_dir, require_label: bool = False) -> SubjectVolumes:
    """Load ``<dir>/{t1,fa,label}.nii[.gz]`` for one subject."""
    subject_dir = Path(subject_dir)
    found = {}
    for seq, stem in _FILENAMES.items():
        p = _find_file(subject_dir, stem)
        if p is None:
            if seq is SequenceKind.LABEL and not require_label:
                continue
            raise FileNotFoundError(f"{subject_dir.name}: missing {stem}.nii[.gz]")
        vol = load_volume(p, seq)
        vol.identity = subject_dir.name
        found[seq] = vol
    subj = SubjectVolumes(subject_dir.name, found[SequenceKind.T1], found[SequenceKind.FA],
                          found.get(SequenceKind.LABEL))
    check_subject(subj)
    return subj


def list_subjects(root) -> List[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir())


def save_subject(subject: SubjectVolumes, root) -> Path:
    out = Path(root) / subject.subject
    save_volume(subject.t1, out / "t1.nii.gz")
    save_volume(subject.fa, out / "fa.nii.gz")
    if subject.label is not None:
        save_volume(subject.label, out / "label.nii.gz")
    return out


def check_subject(subject: SubjectVolumes) -> None:
    vols = [v for v in (subject.t1, subject.fa, subject.label) if v is not None]
    ref = vols[0]
    for v in vols[1:]:
        if v.shape != ref.shape or not np.allclose(v.spacing, ref.spacing):
            raise PairingError(
                f"{subject.subject}: volumes disagree in shape/spacing "
                f"({ref.shape}, {ref.spacing}) vs ({v.shape}, {v.spacing})"
            )


# ---------------------------------------------------------------------------
# preprocessing


def normalize(v: Volume) -> Volume:
    """Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros."""
    if v.sequence is SequenceKind.LABEL:
        raise DataError("label volumes are not intensity-normalized")
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        out = (x - lo) / (hi - lo)
    else:
        out = np.zeros_like(x)
    return Volume(out, v.spacing, v.identity, v.sequence)


def resize_volume(v: Volume, shape: Sequence[int]) -> Volume:
    """Resample to ``shape``: nearest-neighbour for labels, linear for images.

    Spacing is rescaled so the physical extent is preserved.
    """
    factors = [n / o for n, o in zip(shape, v.shape)]
    order = 0 if v.sequence is SequenceKind.LABEL else 1
    out = ndimage.zoom(v.voxels.astype(np.float64), factors, order=order, mode="nearest", grid_mode=True)
    if out.shape != tuple(shape):  # zoom can be off by one on awkward ratios
        pad = [(0, max(0, n - s)) for n, s in zip(shape, out.shape)]
        out = np.pad(out, pad, mode="edge")[tuple(slice(0, n) for n in shape)]
    if order == 0:
        out = np.rint(out).astype(np.uint8)
    spacing = tuple(s / f for s, f in zip(v.spacing, factors))
    return Volume(out, spacing, v.identity, v.sequence)


def slice_pairs(t1: Volume, fa: Volume, label: Optional[Volume] = None, axis: int = -1) -> List[SlicePair]:
    vols = [t1, fa] + ([label] if label is not None else [])
    for v in vols[1:]:
        if v.shape != t1.shape or not np.allclose(v.spacing, t1.spacing):
            raise PairingError(f"cannot pair volumes of shape {t1.shape} and {v.shape}")
    axis = axis % 3
    out = []
    for k in range(t1.shape[axis]):
        lab = None if label is None else np.take(label.voxels, k, axis=axis)
        out.append(
            SlicePair(
                t1=np.take(t1.voxels, k, axis=axis),
                fa=np.take(fa.voxels, k, axis=axis),
                label=lab,
                subject=t1.identity,
                slice_index=k,
            )
        )
    return out


def restack(slices: Iterable[np.ndarray], axis: int = -1) -> np.ndarray:
    return np.stack(list(slices), axis=axis % 3)


def subject_slices(subject: SubjectVolumes, axis: int = -1, with_label: bool = True) -> List[SlicePair]:
    t1, fa = normalize(subject.t1), normalize(subject.fa)
    t1.identity = fa.identity = subject.subject
    label = subject.label if with_label else None
    return slice_pairs(t1, fa, label, axis=axis)


# ---------------------------------------------------------------------------
# splits


def split_dataset(subjects: Sequence[SubjectVolumes], labeled_fraction: float, seed: int,
                  n_test: int = 2, axis: int = -1) -> DatasetSplit:
    """Subject-level random split into labeled / unlabeled / test sets.

    The test set gets ``n_test`` subjects; of the remainder, ``round(labeled_fraction * n)``
    (at least one) are labeled and the rest unlabeled.
    """
    if not 0 < labeled_fraction < 1:
        raise SplitError(f"labeled_fraction must lie in (0, 1), got {labeled_fraction}")
    n = len(subjects)
    if n < 3:
        raise SplitError(f"need at least 3 subjects, got {n}")
    if n_test < 1 or n - n_test < 2:
        raise SplitError(f"cannot hold out {n_test} test subjects from {n} and keep two training sets")
    ids = [s.subject for s in subjects]
    if len(set(ids)) != n:
        raise SplitError("duplicate subject ids")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    test_idx = order[:n_test]
    train_idx = order[n_test:]
    n_lab = min(max(1, round(labeled_fraction * n)), len(train_idx) - 1)
    lab_idx, unl_idx = train_idx[:n_lab], train_idx[n_lab:]

    roles = {}
    labeled, unlabeled = [], []
    for i in lab_idx:
        s = subjects[i]
        if s.label is None:
            raise SplitError(f"subject {s.subject} has no label but was drawn as labeled")
        labeled.extend(subject_slices(s, axis))
        roles[s.subject] = "labeled"
    for i in unl_idx:
        unlabeled.extend(subject_slices(subjects[i], axis, with_label=False))
        roles[subjects[i].subject] = "unlabeled"
    test = [subjects[i] for i in test_idx]
    for s in test:
        roles[s.subject] = "test"
    return DatasetSplit(labeled, unlabeled, test, seed, roles)


def write_split_manifest(roles: Dict[str, str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for subject in sorted(roles):
            fh.write(json.dumps({"subject": subject, "role": roles[subject]}) + "\n")
    return path


def read_split_manifest(path) -> Dict[str, str]:
    roles = {}
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                roles[rec["subject"]] = rec["role"]
    return roles


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomConfig:
    shape: Tuple[int, int, int] = (32, 32, 12)
    spacing: Tuple[float, float, float] = (1.25, 1.25, 1.25)
    tube_radius: float = 1.0
    # fraction of the in-plane extent by which each tube arm wanders off its straight path
    tube_wobble: float = 0.12
    t1_tube_contrast: float = 0.06
    fa_tube_contrast: float = 0.45
    t1_noise: float = 0.04
    fa_noise: float = 0.06
    # bright, thicker FA structures that are not part of the label
    n_distractors: int = 1
    distractor_contrast: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape[:2]) < 16 or self.shape[2] < 2:
            raise PhantomConfigError(f"phantom needs in-plane size >= 16, got {self.shape}")
        if self.tube_radius <= 0 or 2 * self.tube_radius >= min(self.shape[:2]):
            raise PhantomConfigError(f"tube radius {self.tube_radius} is degenerate for shape {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise PhantomConfigError("spacing must be positive")


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _curve_distance(shape, points):
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    dist, _ = cKDTree(points).query(grid.reshape(-1, 3))
    return dist.reshape(shape)


def _arm(rng, shape, wobble, start, end, n=400):
    """A smooth curve from ``start`` to ``end`` with a random sinusoidal bend."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    line = (1 - t) * np.asarray(start, float) + t * np.asarray(end, float)
    amp = wobble * min(shape[:2]) * rng.uniform(0.5, 1.0)
    phase = rng.uniform(0, np.pi)
    direction = np.asarray(end, float) - np.asarray(start, float)
    normal = np.array([-direction[1], direction[0], 0.0])
    normal /= np.linalg.norm(normal) + 1e-12
    bend = amp * np.sin(np.pi * t + phase) * np.sin(np.pi * t)
    zwave = 0.18 * shape[2] * np.sin(2 * np.pi * t * rng.uniform(0.5, 1.0) + rng.uniform(0, 2 * np.pi))
    pts = line + bend * normal
    pts[:, 2:3] += zwave
    return pts


def make_phantom(config: PhantomConfig, subject: str = "phantom") -> Tuple[Volume, Volume, Volume]:
    """Synthesize a (t1, fa, label) triple with an X-shaped thin tubular target.

    The target is two crossing curved arms, 1-3 voxels wide, visible strongly in fa
    and weakly in t1. Both images share a smooth anatomical field so that their
    residual (non-target) content is correlated.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    H, W, D = config.shape
    shape = (H, W, D)

    zc = (D - 1) / 2 + rng.uniform(-0.1, 0.1) * D
    cx, cy = (H - 1) / 2 + rng.uniform(-2, 2), (W - 1) / 2 + rng.uniform(-2, 2)
    arms = []
    for sx, sy in ((-1, -1), (-1, 1)):
        a = [cx + sx * 0.45 * H + rng.uniform(-1.5, 1.5), cy + sy * 0.45 * W + rng.uniform(-1.5, 1.5), zc]
        b = [cx - sx * 0.45 * H + rng.uniform(-1.5, 1.5), cy - sy * 0.45 * W + rng.uniform(-1.5, 1.5), zc]
        arms.append(_arm(rng, shape, config.tube_wobble, a, b))
    dist = _curve_distance(shape, np.concatenate(arms))
    label = (dist <= config.tube_radius).astype(np.uint8)
    # soft tube profile for the image contrast
    tube = np.clip(config.tube_radius + 0.5 - dist, 0.0, 1.0)

    distract = np.zeros(shape)
    for _ in range(config.n_distractors):
        y0 = rng.uniform(0.15, 0.85) * W
        a = [0.0, y0, rng.uniform(0, D - 1)]
        b = [H - 1.0, y0 + rng.uniform(-0.3, 0.3) * W, rng.uniform(0, D - 1)]
        pts = _arm(rng, shape, 0.05, a, b)
        d = _curve_distance(shape, pts)
        # thicker than the target and kept away from it
        distract = np.maximum(distract, np.clip(2.6 - d, 0.0, 1.0) * (dist > config.tube_radius + 2))

    anatomy = _smooth_field(rng, shape, sigma=(4, 4, 2))
    t1_specific = _smooth_field(rng, shape, sigma=(2, 2, 1))
    fa_specific = _smooth_field(rng, shape, sigma=(1.5, 1.5, 1))

    t1 = (0.65 * anatomy + 0.35 * t1_specific + config.t1_tube_contrast * tube
          + config.t1_noise * rng.standard_normal(shape))
    fa = (0.45 * anatomy + 0.25 * fa_specific + config.fa_tube_contrast * tube
          + config.distractor_contrast * distract + config.fa_noise * rng.standard_normal(shape))

    spacing = tuple(config.spacing)
    t1v = normalize(Volume(t1, spacing, subject, SequenceKind.T1))
    fav = normalize(Volume(fa, spacing, subject, SequenceKind.FA))
    labv = Volume(label, spacing, subject, SequenceKind.LABEL)
    return t1v, fav, labv


def contrast_to_noise(image: np.ndarray, label: np.ndarray) -> float:
    """(mean inside - mean outside) / std outside."""
    inside, outside = image[label > 0], image[label == 0]
    return float((inside.mean() - outside.mean()) / (outside.std() + 1e-12))


def phantom_cohort(n_subjects: int, seed: int, config: Optional[PhantomConfig] = None) -> List[SubjectVolumes]:
    base = config or PhantomConfig()
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects)
    out = []
    for i in range(n_subjects):
        cfg = PhantomConfig(**{**base.__dict__, "seed": int(seeds[i])})
        name = f"sub{i:03d}"
        t1, fa, lab = make_phantom(cfg, subject=name)
        out.append(SubjectVolumes(name, t1, fa, lab))
    return out
