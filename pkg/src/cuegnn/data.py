"""Dataset formats, ingestion, cue capping, and synthetic data generation.

On-disk layout is a JSON manifest plus one JSON-Lines file per partition.
Each record line carries a sample id, an integer label, and a map from cue
name to a list of feature vectors. Floats are serialized with Python's repr
(shortest round-trip form), so values survive a write/read cycle exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .model import CueSpec, GraphSample

FORMAT_VERSION = 1


def dataset_fingerprint(classes: tuple[str, ...], cues: tuple[CueSpec, ...]) -> bytes:
    """sha256 over the class list and cue declarations.

    Checkpoints store this digest; training/evaluation refuse to pair a
    checkpoint with a dataset whose fingerprint differs.
    """
    payload = {
        "classes": list(classes),
        "cues": [[c.name, c.feature_dim, c.cap_train, c.cap_eval] for c in cues],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).digest()


@dataclass(frozen=True)
class DatasetManifest:
    """Class names (order defines label indices), cue declarations, partitions."""

    classes: tuple[str, ...]
    cues: tuple[CueSpec, ...]
    partitions: dict[str, str]  # partition name -> record file path, relative to manifest
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.version != FORMAT_VERSION:
            raise DataError(f"unsupported manifest version {self.version}")
        if len(self.classes) < 2:
            raise DataError(f"need at least 2 classes, got {len(self.classes)}")
        if not self.cues:
            raise DataError("need at least one cue")
        names = [c.name for c in self.cues]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate cue names in manifest: {names}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def fingerprint(self) -> bytes:
        return dataset_fingerprint(self.classes, self.cues)


@dataclass
class Dataset:
    manifest: DatasetManifest
    partitions: dict[str, list[GraphSample]]

    def partition(self, name: str) -> list[GraphSample]:
        if name not in self.partitions:
            raise DataError(
                f"partition '{name}' not in dataset (have {sorted(self.partitions)})"
            )
        return self.partitions[name]


def _cues_from_json(raw) -> tuple[CueSpec, ...]:
    cues = []
    for i, c in enumerate(raw):
        try:
            cues.append(
                CueSpec(
                    cue_id=i,
                    name=c["name"],
                    feature_dim=int(c["dim"]),
                    cap_train=int(c["cap_train"]),
                    cap_eval=int(c["cap_eval"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad cue entry {c!r}: {exc}") from exc
    return tuple(cues)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("version", "classes", "cues", "partitions"):
        if key not in raw:
            raise DataError(f"manifest {path} missing field '{key}'")
    return DatasetManifest(
        classes=tuple(raw["classes"]),
        cues=_cues_from_json(raw["cues"]),
        partitions=dict(raw["partitions"]),
        version=int(raw["version"]),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    payload = {
        "version": manifest.version,
        "classes": list(manifest.classes),
        "cues": [
            {
                "name": c.name,
                "dim": c.feature_dim,
                "cap_train": c.cap_train,
                "cap_eval": c.cap_eval,
            }
            for c in manifest.cues
        ],
        "partitions": manifest.partitions,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def parse_record(line: str, manifest: DatasetManifest, lineno: int = 0) -> GraphSample:
    """Parse one record line and validate it against the manifest."""
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"record line {lineno} is not valid JSON: {exc}") from exc
    sample_id = str(raw.get("sample_id", f"line-{lineno}"))
    if "label" not in raw:
        raise DataError("record missing 'label'", sample_id=sample_id)
    label = raw["label"]
    if not isinstance(label, int) or not 0 <= label < manifest.n_classes:
        raise DataError(
            f"label {label!r} outside [0, {manifest.n_classes})", sample_id=sample_id
        )
    feature_map = raw.get("features", {})
    known = {c.name for c in manifest.cues}
    for name in feature_map:
        if name not in known:
            raise DataError(f"unknown cue '{name}'", sample_id=sample_id)
    features = []
    for cue in manifest.cues:
        vectors = feature_map.get(cue.name, [])
        arr = np.zeros((len(vectors), cue.feature_dim))
        for j, vec in enumerate(vectors):
            if len(vec) != cue.feature_dim:
                raise DataError(
                    f"vector {j} has length {len(vec)}, expected {cue.feature_dim}",
                    sample_id=sample_id,
                    cue=cue.name,
                )
            arr[j] = vec
        features.append(arr)
    sample = GraphSample(sample_id=sample_id, label=label, features_per_cue=features)
    if sample.node_count < 1:
        raise DataError("sample has zero nodes", sample_id=sample_id)
    return sample


def record_to_json(sample: GraphSample, manifest: DatasetManifest) -> str:
    features = {}
    for cue, arr in zip(manifest.cues, sample.features_per_cue):
        if arr.shape[0]:
            features[cue.name] = [[float(x) for x in row] for row in arr]
    return json.dumps(
        {"sample_id": sample.sample_id, "label": sample.label, "features": features},
        separators=(",", ":"),
    )


def read_records(path: str | Path, manifest: DatasetManifest) -> list[GraphSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"record file not found: {path}")
    samples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                samples.append(parse_record(line, manifest, lineno))
    return samples


def write_records(samples: list[GraphSample], manifest: DatasetManifest, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for sample in samples:
            fh.write(record_to_json(sample, manifest) + "\n")


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load the manifest and every partition it declares, fully validated."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    partitions = {}
    for name, rel in manifest.partitions.items():
        partitions[name] = read_records(manifest_path.parent / rel, manifest)
    return Dataset(manifest=manifest, partitions=partitions)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write manifest plus all partitions under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in dataset.partitions:
        rel = dataset.manifest.partitions[name]
        write_records(dataset.partitions[name], dataset.manifest, out_dir / rel)
    manifest_path = out_dir / "manifest.json"
    save_manifest(dataset.manifest, manifest_path)
    return manifest_path


def cap_cues(
    sample: GraphSample,
    specs: tuple[CueSpec, ...],
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> GraphSample:
    """Limit each cue's node count to its cap.

    Train mode keeps a uniformly random subset (original order preserved
    among kept items); eval mode keeps the first ``cap_eval`` items and
    consumes no randomness. Returns the sample unchanged when no cue
    exceeds its cap. Large graphs are capped so items with many detections
    cannot dominate an epoch.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    new_features = None
    for i, spec in enumerate(specs):
        feats = sample.features_per_cue[i]
        cap = spec.cap_train if mode == "train" else spec.cap_eval
        if feats.shape[0] <= cap:
            continue
        if new_features is None:
            new_features = list(sample.features_per_cue)
        if mode == "eval":
            new_features[i] = feats[:cap]
        else:
            if rng is None:
                raise ValueError("train-mode capping requires an rng")
            keep = np.sort(rng.choice(feats.shape[0], size=cap, replace=False))
            new_features[i] = feats[keep]
    if new_features is None:
        return sample
    return GraphSample(
        sample_id=sample.sample_id, label=sample.label, features_per_cue=new_features
    )


# ----------------------------------------------------------------------
# Synthetic datasets
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCue:
    name: str
    dim: int
    mean_nodes: float
    min_nodes: int = 0
    cap_train: int = 16
    cap_eval: int = 48


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a Gaussian-cluster multi-cue dataset.

    ``centers[i]`` is a (C, dim_i) array of per-class cluster centers for cue
    i. Distractor nodes are drawn from a class-independent standard cluster
    at the origin, at rate ``distractor_fraction``.
    """

    classes: tuple[str, ...]
    cues: tuple[SyntheticCue, ...]
    centers: tuple[np.ndarray, ...]
    noise_scale: float
    counts: dict[str, int]
    seed: int
    distractor_fraction: float = 0.0

    def __post_init__(self):
        if self.noise_scale <= 0:
            raise ValueError(f"noise_scale must be > 0, got {self.noise_scale}")
        if len(self.centers) != len(self.cues):
            raise ValueError("one centers array per cue is required")
        for cue, ctr in zip(self.cues, self.centers):
            if ctr.shape != (len(self.classes), cue.dim):
                raise ValueError(
                    f"centers for cue '{cue.name}' must have shape "
                    f"({len(self.classes)}, {cue.dim}), got {ctr.shape}"
                )
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor_fraction must be in [0, 1)")


def make_centers(
    n_classes: int, dim: int, separation: float, seed: int
) -> np.ndarray:
    """Per-class centers with pairwise distance exactly ``separation``.

    Uses C orthonormal directions (QR of a seeded Gaussian matrix) scaled by
    separation / sqrt(2); requires dim >= n_classes.
    """
    if dim < n_classes:
        raise ValueError(f"need dim >= n_classes for auto centers, got {dim} < {n_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    return (separation / math.sqrt(2.0)) * q.T  # (C, dim)


def make_synthetic_spec(
    classes,
    cues,
    noise_scale: float,
    counts: dict[str, int],
    seed: int,
    separation: float | None = None,
    distractor_fraction: float = 0.0,
    centers=None,
) -> SyntheticSpec:
    """Build a SyntheticSpec, deriving centers from ``separation`` if not given."""
    classes = tuple(classes)
    cues = tuple(cues)
    if centers is None:
        if separation is None:
            raise ValueError("either centers or separation must be given")
        centers = tuple(
            make_centers(len(classes), cue.dim, separation, seed + i)
            for i, cue in enumerate(cues)
        )
    else:
        centers = tuple(np.asarray(c, dtype=np.float64) for c in centers)
    return SyntheticSpec(
        classes=classes,
        cues=cues,
        centers=centers,
        noise_scale=noise_scale,
        counts=dict(counts),
        seed=seed,
        distractor_fraction=distractor_fraction,
    )


def _manifest_for_synthetic(spec: SyntheticSpec) -> DatasetManifest:
    cues = tuple(
        CueSpec(
            cue_id=i,
            name=c.name,
            feature_dim=c.dim,
            cap_train=c.cap_train,
            cap_eval=c.cap_eval,
        )
        for i, c in enumerate(spec.cues)
    )
    return DatasetManifest(
        classes=spec.classes,
        cues=cues,
        partitions={name: f"{name}.jsonl" for name in spec.counts},
    )


def build_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate the dataset in memory; fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    manifest = _manifest_for_synthetic(spec)
    n_classes = len(spec.classes)
    partitions: dict[str, list[GraphSample]] = {}
    for part, count in spec.counts.items():
        labels = np.array([i % n_classes for i in range(count)])
        rng.shuffle(labels)
        samples = []
        for idx in range(count):
            label = int(labels[idx])
            node_counts = []
            for cue in spec.cues:
                extra = max(cue.mean_nodes - cue.min_nodes, 0.0)
                node_counts.append(cue.min_nodes + int(rng.poisson(extra)))
            if sum(node_counts) == 0:
                bump = max(range(len(spec.cues)), key=lambda i: spec.cues[i].mean_nodes)
                node_counts[bump] = 1
            features = []
            for i, cue in enumerate(spec.cues):
                n_i = node_counts[i]
                arr = np.empty((n_i, cue.dim))
                for j in range(n_i):
                    if spec.distractor_fraction and rng.random() < spec.distractor_fraction:
                        center = np.zeros(cue.dim)
                    else:
                        center = spec.centers[i][label]
                    arr[j] = center + spec.noise_scale * rng.standard_normal(cue.dim)
                features.append(arr)
            samples.append(
                GraphSample(
                    sample_id=f"{part}-{idx:05d}",
                    label=label,
                    features_per_cue=features,
                )
            )
        partitions[part] = samples
    return Dataset(manifest=manifest, partitions=partitions)


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Generate and write the dataset; returns the manifest path."""
    return write_dataset(build_synthetic(spec), out_dir)


def restrict_to_cues(dataset: Dataset, cue_names: list[str]) -> Dataset:
    """Dataset view keeping only the named cues (for single-cue ablations).

    Samples left with zero nodes are dropped.
    """
    keep = [i for i, c in enumerate(dataset.manifest.cues) if c.name in cue_names]
    missing = set(cue_names) - {c.name for c in dataset.manifest.cues}
    if missing:
        raise DataError(f"unknown cues {sorted(missing)}")
    cues = tuple(
        CueSpec(
            cue_id=new_id,
            name=dataset.manifest.cues[old].name,
            feature_dim=dataset.manifest.cues[old].feature_dim,
            cap_train=dataset.manifest.cues[old].cap_train,
            cap_eval=dataset.manifest.cues[old].cap_eval,
        )
        for new_id, old in enumerate(keep)
    )
    manifest = DatasetManifest(
        classes=dataset.manifest.classes,
        cues=cues,
        partitions=dict(dataset.manifest.partitions),
    )
    partitions = {}
    for name, samples in dataset.partitions.items():
        kept = []
        for s in samples:
            features = [s.features_per_cue[old] for old in keep]
            if sum(f.shape[0] for f in features) >= 1:
                kept.append(
                    GraphSample(
                        sample_id=s.sample_id, label=s.label, features_per_cue=features
                    )
                )
        partitions[name] = kept
    return Dataset(manifest=manifest, partitions=partitions)


# ----------------------------------------------------------------------
# External feature import
# ----------------------------------------------------------------------


def import_features(
    input_dir: str | Path,
    out_dir: str | Path,
    class_names=None,
    cap_train: int = 16,
    cap_eval: int = 48,
) -> Path:
    """Convert a directory of per-sample vector files into the native format.

    Expected layout: ``input_dir/labels.csv`` with header
    ``sample_id,label[,partition]`` (partition defaults to "train"), plus one
    subdirectory per cue holding ``<sample_id>.csv`` files with one
    comma-separated feature vector per line. A missing file means the sample
    has no nodes of that cue. Each cue's dimensionality is fixed by the
    first file read; inconsistent rows are an error.
    """
    input_dir = Path(input_dir)
    labels_path = input_dir / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"no labels.csv in {input_dir}")
    cue_dirs = sorted(d for d in input_dir.iterdir() if d.is_dir())
    if not cue_dirs:
        raise DataError(f"no cue subdirectories in {input_dir}")

    rows = []
    with labels_path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "sample_id":
            raise DataError("labels.csv must start with a 'sample_id,label[,partition]' header")
        for row in reader:
            if not row:
                continue
            sample_id = row[0]
            try:
                label = int(row[1])
            except (IndexError, ValueError):
                raise DataError("bad label", sample_id=sample_id)
            partition = row[2] if len(row) > 2 and row[2] else "train"
            rows.append((sample_id, label, partition))
    if not rows:
        raise DataError(f"labels.csv in {input_dir} has no samples")

    max_label = max(label for _, label, _ in rows)
    if class_names is None:
        class_names = tuple(f"class_{i}" for i in range(max(max_label + 1, 2)))
    else:
        class_names = tuple(class_names)
        if max_label >= len(class_names):
            raise DataError(f"label {max_label} outside the {len(class_names)} declared classes")

    dims: dict[str, int] = {}
    vectors: dict[str, dict[str, np.ndarray]] = {d.name: {} for d in cue_dirs}
    for cue_dir in cue_dirs:
        for f in sorted(cue_dir.glob("*.csv")):
            sample_id = f.stem
            rows_f = [
                [float(x) for x in line.split(",")]
                for line in f.read_text().splitlines()
                if line.strip()
            ]
            if not rows_f:
                continue
            dim = len(rows_f[0])
            if cue_dir.name not in dims:
                dims[cue_dir.name] = dim
            for j, vec in enumerate(rows_f):
                if len(vec) != dims[cue_dir.name]:
                    raise DataError(
                        f"vector {j} has length {len(vec)}, expected {dims[cue_dir.name]}",
                        sample_id=sample_id,
                        cue=cue_dir.name,
                    )
            vectors[cue_dir.name][sample_id] = np.array(rows_f, dtype=np.float64)
    for cue_dir in cue_dirs:
        if cue_dir.name not in dims:
            raise DataError(f"cue directory '{cue_dir.name}' contains no feature files")

    cues = tuple(
        CueSpec(
            cue_id=i,
            name=d.name,
            feature_dim=dims[d.name],
            cap_train=cap_train,
            cap_eval=cap_eval,
        )
        for i, d in enumerate(cue_dirs)
    )
    partition_names = []
    for _, _, part in rows:
        if part not in partition_names:
            partition_names.append(part)
    manifest = DatasetManifest(
        classes=class_names,
        cues=cues,
        partitions={name: f"{name}.jsonl" for name in partition_names},
    )
    partitions: dict[str, list[GraphSample]] = {name: [] for name in partition_names}
    for sample_id, label, part in rows:
        features = []
        for cue in cues:
            arr = vectors[cue.name].get(sample_id)
            features.append(arr if arr is not None else np.zeros((0, cue.feature_dim)))
        sample = GraphSample(sample_id=sample_id, label=label, features_per_cue=features)
        if sample.node_count < 1:
            raise DataError("sample has zero nodes across all cues", sample_id=sample_id)
        partitions[part].append(sample)

    return write_dataset(Dataset(manifest=manifest, partitions=partitions), out_dir)
