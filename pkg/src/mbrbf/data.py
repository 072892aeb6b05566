"""Dataset manifests, deterministic splits/batching, and synthetic data.

A dataset is a directory with a ``manifest.csv`` (header exactly
``sample_id,path,label,split,source``) whose ``path`` column points at
rank-3 ``.mbrt`` feature blocks relative to the manifest.  The synthetic
generator emulates a corpus merged from two visually distinct
sub-populations per class: each class owns two prototype "modes" sitting on
opposite ends of a class direction, so samples of one class can look less
alike than samples of different classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptySplitError, ValidationError
from .tensorio import read_tensor, write_tensor

MANIFEST_HEADER = ["sample_id", "path", "label", "split", "source"]
SPLITS = ("train", "val", "test")

TEST_FRACTION = 0.2
VAL_FRACTION = 0.1

# Two-mode layout: angle of the second mode's offset between "toward the
# next class's first mode" (0 deg, maximally confusable) and "orthogonal to
# every class direction" (90 deg, isolated).
MINORITY_ANGLE_DEG = 25.0


@dataclass(frozen=True)
class Record:
    sample_id: str
    path: str
    label: int
    split: str
    source: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    classes: int
    base_dir: Path | None = None

    def split_records(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def source_tags(self) -> list[str]:
        return sorted({r.source for r in self.records})


def _validate_records(records: list[Record]) -> int:
    # emptiness of train/test is checked where a split is consumed, so a
    # partial manifest (e.g. features-only deliveries) still loads
    problems = []
    seen_ids: set[str] = set()
    seen_paths: set[str] = set()
    max_label = -1
    for i, r in enumerate(records):
        row = i + 2  # header is line 1
        if r.sample_id in seen_ids:
            problems.append(f"row {row}: duplicate sample_id {r.sample_id!r}")
        seen_ids.add(r.sample_id)
        if r.path in seen_paths:
            problems.append(f"row {row}: duplicate path {r.path!r}")
        seen_paths.add(r.path)
        if r.label < 0:
            problems.append(f"row {row}: negative label {r.label}")
        max_label = max(max_label, r.label)
        if r.split not in SPLITS:
            problems.append(f"row {row}: unknown split {r.split!r}")
    if problems:
        raise ValidationError("invalid manifest:\n  " + "\n  ".join(problems))
    return max_label + 1


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest CSV; class count is max label + 1."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise ValidationError(
                f"{path}: header must be {','.join(MANIFEST_HEADER)!r}, got {','.join(header)!r}"
            )
        records = []
        problems = []
        for i, row in enumerate(reader):
            lineno = i + 2
            if len(row) != 5:
                problems.append(f"row {lineno}: expected 5 fields, got {len(row)}")
                continue
            sid, rel, label_txt, split, source = row
            try:
                label = int(label_txt)
            except ValueError:
                problems.append(f"row {lineno}: label {label_txt!r} is not an integer")
                continue
            records.append(Record(sid, rel, label, split, source))
    if problems:
        raise ValidationError(f"invalid manifest {path}:\n  " + "\n  ".join(problems))
    classes = _validate_records(records)
    return DatasetManifest(records=records, classes=classes, base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.sample_id, r.path, r.label, r.split, r.source])


def split_dataset(records: list[Record], seed: int) -> DatasetManifest:
    """Assign stratified splits: 20% test, ~10% of the total as validation.

    Deterministic per seed.  Classes with fewer than 3 samples cannot be
    stratified and raise a validation error.
    """
    by_label: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_label.setdefault(r.label, []).append(i)
    for label, idxs in sorted(by_label.items()):
        if len(idxs) < 3:
            raise ValidationError(
                f"class {label} has only {len(idxs)} samples; need >= 3 to stratify"
            )
    rng = np.random.default_rng(seed)
    assignment: dict[int, str] = {}
    for label, idxs in sorted(by_label.items()):
        order = rng.permutation(len(idxs))
        n = len(idxs)
        n_test = int(n * TEST_FRACTION + 0.5)
        n_val = int(n * VAL_FRACTION + 0.5)
        for pos, j in enumerate(order):
            if pos < n_test:
                split = "test"
            elif pos < n_test + n_val:
                split = "val"
            else:
                split = "train"
            assignment[idxs[j]] = split
    out = [replace(r, split=assignment[i]) for i, r in enumerate(records)]
    classes = _validate_records(out)
    return DatasetManifest(records=out, classes=classes)


def batch_index_iter(n: int, batch_size: int, epoch_seed, shuffle: bool):
    """Yield index arrays covering 0..n-1; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if n == 0:
        raise EmptySplitError("cannot iterate an empty split")
    if shuffle:
        order = np.random.default_rng(epoch_seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batch_iter(manifest: DatasetManifest, split: str, batch_size: int, epoch_seed):
    """Yield record batches; the train split is shuffled per epoch_seed."""
    records = manifest.split_records(split)
    for idx in batch_index_iter(len(records), batch_size, epoch_seed, shuffle=split == "train"):
        yield [records[i] for i in idx]


def load_split_arrays(manifest: DatasetManifest, split: str):
    """Load a split's feature blocks into (X, labels, sources) arrays."""
    records = manifest.split_records(split)
    if not records:
        raise EmptySplitError(f"split {split!r} is empty")
    base = manifest.base_dir or Path(".")
    blocks = []
    for r in records:
        t = read_tensor(Path(base) / r.path)
        if blocks and t.shape != blocks[0].shape:
            raise ValidationError(
                f"{r.path}: shape {t.shape} differs from {blocks[0].shape}"
            )
        blocks.append(t)
    x = np.stack(blocks)
    y = np.asarray([r.label for r in records], dtype=np.int64)
    sources = [r.source for r in records]
    return x, y, sources


@dataclass
class DataBundle:
    """A manifest plus every feature block preloaded in record order.

    Re-splitting experiments swap in a manifest with different split labels
    while reusing the loaded arrays (see :meth:`with_manifest`).
    """

    manifest: DatasetManifest
    x: np.ndarray  # (N, C, H, W) in manifest record order
    y: np.ndarray  # (N,)
    sources: list[str]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "DataBundle":
        base = manifest.base_dir or Path(".")
        blocks = []
        for r in manifest.records:
            t = read_tensor(Path(base) / r.path)
            if blocks and t.shape != blocks[0].shape:
                raise ValidationError(
                    f"{r.path}: shape {t.shape} differs from {blocks[0].shape}"
                )
            blocks.append(t)
        if not blocks:
            raise ValidationError("manifest has no records")
        return cls(
            manifest=manifest,
            x=np.stack(blocks),
            y=np.asarray([r.label for r in manifest.records], dtype=np.int64),
            sources=[r.source for r in manifest.records],
        )

    def feature_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def split_indices(self, split: str) -> np.ndarray:
        idx = [i for i, r in enumerate(self.manifest.records) if r.split == split]
        if not idx:
            raise EmptySplitError(f"split {split!r} is empty")
        return np.asarray(idx)

    def split_arrays(self, split: str):
        idx = self.split_indices(split)
        return self.x[idx], self.y[idx], [self.sources[i] for i in idx]

    def with_manifest(self, manifest: DatasetManifest) -> "DataBundle":
        if [r.sample_id for r in manifest.records] != [
            r.sample_id for r in self.manifest.records
        ]:
            raise ValidationError("with_manifest requires the same records in the same order")
        return DataBundle(manifest=manifest, x=self.x, y=self.y, sources=self.sources)


# ---------------------------------------------------------------------------
# Synthetic bimodal data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    modes_per_class: int = 2
    samples_per_mode: int | tuple[int, ...] = 60
    feature_shape: tuple[int, int, int] = (8, 7, 7)
    mode_separation: float = 1.2
    noise_scale: float = 0.012
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.modes_per_class < 1:
            raise ConfigError("modes_per_class must be >= 1")
        if not (self.noise_scale > 0):
            raise ConfigError("noise_scale must be positive")
        if not (self.mode_separation > 0):
            raise ConfigError("mode_separation must be positive")
        counts = self.mode_counts()
        if any(c < 1 for c in counts):
            raise ConfigError("samples_per_mode entries must be >= 1")

    def mode_counts(self) -> tuple[int, ...]:
        if isinstance(self.samples_per_mode, int):
            return (self.samples_per_mode,) * self.modes_per_class
        if len(self.samples_per_mode) != self.modes_per_class:
            raise ConfigError(
                f"samples_per_mode needs {self.modes_per_class} entries, "
                f"got {len(self.samples_per_mode)}"
            )
        return tuple(int(c) for c in self.samples_per_mode)


def synth_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Mode prototypes of shape (classes, modes, C*H*W).

    Classes sit on mutually orthonormal directions.  In the two-mode case
    mode 0 of class k lies at (s/2) v_k and mode 1 at distance exactly
    s = mode_separation from it, shifted toward class k+1, which parks it
    about 0.29 s away from that class's mode 0: the two sub-populations of
    one class look very different, and one of them resembles a foreign
    dominant sub-population.  With any other mode count every (class, mode)
    pair gets its own orthonormal direction and all pairwise prototype
    distances are ~s.
    """
    c, h, w = cfg.feature_shape
    dim = c * h * w
    k, m = cfg.classes, cfg.modes_per_class
    n_dirs = 2 * k if m == 2 else k * m
    if n_dirs > dim:
        raise ConfigError(f"need {n_dirs} orthogonal directions but only {dim} dims")
    rng = np.random.default_rng(cfg.seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_dirs)))
    protos = np.empty((k, m, dim))
    s = cfg.mode_separation
    if m == 2:
        cos_a = np.cos(np.radians(MINORITY_ANGLE_DEG))
        sin_a = np.sin(np.radians(MINORITY_ANGLE_DEG))
        for ki in range(k):
            anchor = (s / 2.0) * q[:, ki]
            toward = (q[:, (ki + 1) % k] - q[:, ki]) / np.sqrt(2.0)
            away = q[:, k + ki]
            protos[ki, 0] = anchor
            protos[ki, 1] = anchor + s * (cos_a * toward + sin_a * away)
    else:
        radius = s / np.sqrt(2.0)
        for ki in range(k):
            for mi in range(m):
                protos[ki, mi] = radius * q[:, ki * m + mi]
    return protos


def gen_bimodal_synth(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Generate feature blocks + manifest under ``out_dir``; deterministic per seed.

    Samples are ``prototype + noise_scale * N(0, I)``, tagged with
    ``source = mode<m>`` so per-sub-population accuracy can be reported.
    Splits are assigned with :func:`split_dataset` using the same seed.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    protos = synth_prototypes(cfg)
    counts = cfg.mode_counts()
    # separate stream for noise so prototypes match synth_prototypes(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    records = []
    for ki in range(cfg.classes):
        for mi in range(cfg.modes_per_class):
            for j in range(counts[mi]):
                sid = f"c{ki}m{mi}s{j:04d}"
                block = (
                    protos[ki, mi] + cfg.noise_scale * rng.standard_normal(protos.shape[-1])
                ).reshape(cfg.feature_shape)
                rel = f"features/{sid}.mbrt"
                write_tensor(block, out_dir / rel)
                records.append(Record(sid, rel, ki, "train", f"mode{mi}"))
    manifest = split_dataset(records, cfg.seed)
    manifest.base_dir = out_dir
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
