"""Embedding bundles, label manifests and the sample-selection protocol.

A bundle pairs a manifest (one :class:`SampleRecord` per scan) with a dense
float32 embedding matrix whose row ``i`` belongs to record ``i``.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_path
from .errors import (
    AlignmentError,
    ConfigError,
    DataError,
    DuplicateSampleError,
    EmptySelectionError,
    HeaderError,
    LabelDomainError,
)

MANIFEST_COLUMNS = ("sample_id", "patient_id", "dataset_id", "diagnosis", "density", "age", "view", "split")
DIAGNOSIS_TOKENS = ("healthy", "benign", "malignant")
DENSITY_TOKENS = ("A", "B", "C", "D")
SPLIT_TOKENS = ("train", "test")

FMBE_MAGIC = b"FMBE"
FMBE_VERSION = 1
_FMBE_HEADER = struct.Struct("<4sIQQ")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, token: str) -> int:
        return self.classes.index(token)


DIAGNOSIS = TaskSpec("diagnosis", DIAGNOSIS_TOKENS)
DENSITY = TaskSpec("density", DENSITY_TOKENS)
TASKS = {"diagnosis": DIAGNOSIS, "density": DENSITY}


def get_task(name: str | TaskSpec) -> TaskSpec:
    if isinstance(name, TaskSpec):
        return name
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    patient_id: str
    dataset_id: str
    diagnosis: str | None = None
    density: str | None = None
    age: float | None = None
    view: str | None = None
    split: str | None = None

    def label(self, task: TaskSpec) -> str | None:
        return self.diagnosis if task.name == "diagnosis" else self.density

    @property
    def patient_key(self) -> tuple[str, str]:
        # patient ids are only unique within their source dataset
        return (self.dataset_id, self.patient_id)


@dataclass(frozen=True)
class DatasetBundle:
    records: tuple[SampleRecord, ...]
    embeddings: np.ndarray
    domains: tuple[str, ...] = field(default=())

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise AlignmentError("embeddings must be a 2-D matrix")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        if len(records) != emb.shape[0]:
            raise AlignmentError(
                f"manifest has {len(records)} rows but embeddings have {emb.shape[0]}")
        seen: set[str] = set()
        for r in records:
            if r.sample_id in seen:
                raise DuplicateSampleError(f"duplicate sample_id {r.sample_id!r}")
            if not r.dataset_id:
                raise DataError(f"sample {r.sample_id!r} has an empty dataset_id")
            seen.add(r.sample_id)
        present = sorted({r.dataset_id for r in records})
        domains = tuple(self.domains) or tuple(present)
        missing = set(present) - set(domains)
        if missing:
            raise DataError(f"dataset ids not in domain registry: {sorted(missing)}")
        object.__setattr__(self, "domains", domains)
        _check_split_consistency(records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def feature_dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def dataset_ids(self) -> list[str]:
        return sorted({r.dataset_id for r in self.records})

    def features(self) -> np.ndarray:
        return self.embeddings.astype(np.float64)

    def labels(self, task: TaskSpec | str) -> np.ndarray:
        task = get_task(task)
        out = np.empty(len(self.records), dtype=np.int64)
        for i, r in enumerate(self.records):
            tok = r.label(task)
            if tok is None:
                raise DataError(f"sample {r.sample_id!r} has no {task.name} label")
            out[i] = task.index(tok)
        return out

    def domain_index(self, domains: Sequence[str] | None = None) -> np.ndarray:
        registry = list(domains if domains is not None else self.dataset_ids)
        lookup = {d: i for i, d in enumerate(registry)}
        try:
            return np.array([lookup[r.dataset_id] for r in self.records], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown domain id {exc.args[0]!r}") from None

    def subset(self, index: Iterable[int] | np.ndarray) -> "DatasetBundle":
        idx = np.asarray(list(index) if not isinstance(index, np.ndarray) else index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return DatasetBundle(tuple(self.records[i] for i in idx), self.embeddings[idx],
                             self.domains)

    def where(self, *, split: str | None = None, dataset_id: str | None = None) -> "DatasetBundle":
        mask = [
            (split is None or r.split == split) and (dataset_id is None or r.dataset_id == dataset_id)
            for r in self.records
        ]
        return self.subset(np.array(mask, dtype=bool))


def _check_split_consistency(records: Sequence[SampleRecord]) -> None:
    seen: dict[tuple[str, str], str] = {}
    for r in records:
        if r.split is None:
            continue
        prev = seen.setdefault(r.patient_key, r.split)
        if prev != r.split:
            raise DataError(f"patient {r.patient_id!r} of {r.dataset_id!r} straddles splits")


# -- files -------------------------------------------------------------------

def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise DataError("embedding matrix must be 2-D")
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(_FMBE_HEADER.pack(FMBE_MAGIC, FMBE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_embeddings(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FMBE_HEADER.size:
        raise HeaderError(f"{path}: truncated embedding header")
    magic, version, n, m = _FMBE_HEADER.unpack_from(raw)
    if magic != FMBE_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected {FMBE_MAGIC!r}")
    if version != FMBE_VERSION:
        raise HeaderError(f"{path}: unsupported embedding file version {version}")
    expected = _FMBE_HEADER.size + 4 * n * m
    if len(raw) != expected:
        raise HeaderError(f"{path}: payload is {len(raw) - _FMBE_HEADER.size} bytes, "
                          f"header declares {n}x{m} float32")
    data = np.frombuffer(raw, dtype="<f4", offset=_FMBE_HEADER.size, count=n * m)
    return data.reshape(n, m).astype(np.float32)


def _parse_optional(value: str, allowed: Sequence[str], column: str, line: int) -> str | None:
    value = value.strip()
    if value == "":
        return None
    if value not in allowed:
        raise LabelDomainError(f"row {line}: {column} token {value!r} not in {list(allowed)}")
    return value


def read_manifest(path: str | Path) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise HeaderError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        records = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise HeaderError(f"row {line}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            sample_id, patient_id, dataset_id, diag, dens, age, view, split = (c.strip() for c in row)
            if not sample_id or not patient_id or not dataset_id:
                raise DataError(f"row {line}: sample_id, patient_id and dataset_id are required")
            try:
                age_val = float(age) if age else None
            except ValueError:
                raise DataError(f"row {line}: age {age!r} is not a number") from None
            records.append(SampleRecord(
                sample_id=sample_id,
                patient_id=patient_id,
                dataset_id=dataset_id,
                diagnosis=_parse_optional(diag, DIAGNOSIS_TOKENS, "diagnosis", line),
                density=_parse_optional(dens, DENSITY_TOKENS, "density", line),
                age=age_val,
                view=view or None,
                split=_parse_optional(split, SPLIT_TOKENS, "split", line),
            ))
    return records


def _fmt_age(age: float | None) -> str:
    if age is None:
        return ""
    return str(int(age)) if float(age).is_integer() else repr(float(age))


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.patient_id, r.dataset_id, r.diagnosis or "",
                        r.density or "", _fmt_age(r.age), r.view or "", r.split or ""])


def load_bundle(manifest_path: str | Path, embeddings_path: str | Path) -> DatasetBundle:
    records = read_manifest(manifest_path)
    emb = read_embeddings(embeddings_path)
    if len(records) != emb.shape[0]:
        raise AlignmentError(f"manifest has {len(records)} rows, embedding file has {emb.shape[0]}")
    return DatasetBundle(tuple(records), emb)


def save_bundle(bundle: DatasetBundle, manifest_path: str | Path, embeddings_path: str | Path) -> None:
    write_manifest(manifest_path, bundle.records)
    write_embeddings(embeddings_path, bundle.embeddings)


# -- sample selection --------------------------------------------------------

def select_samples(bundle: DatasetBundle, task: TaskSpec | str, cap: int = 1000,
                   seed: int = 0) -> DatasetBundle:
    """Drop unlabelled scans and cap every (dataset, class) at ``cap`` patients.

    Capping samples whole patients uniformly at random; the sampled patients
    keep all their scans of that class. Datasets without any label for the
    task disappear as a side effect.
    """
    task = get_task(task)
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    groups: dict[tuple[str, str], set[str]] = {}
    for r in bundle.records:
        tok = r.label(task)
        if tok is not None:
            groups.setdefault((r.dataset_id, tok), set()).add(r.patient_id)
    if not groups:
        raise EmptySelectionError(
            f"no {task.name} labels in any dataset; input datasets: {bundle.dataset_ids}")

    rng = np.random.default_rng(seed)
    keep: set[tuple[str, str, str]] = set()
    for key in sorted(groups):
        patients = sorted(groups[key])
        if len(patients) > cap:
            chosen = rng.choice(len(patients), size=cap, replace=False)
            patients = [patients[i] for i in sorted(chosen)]
        keep.update((key[0], key[1], p) for p in patients)

    idx = [i for i, r in enumerate(bundle.records)
           if (r.dataset_id, r.label(task), r.patient_id) in keep]
    return bundle.subset(np.array(idx, dtype=np.int64))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_patients(bundle: DatasetBundle, train_fraction: float = 0.70,
                   seed: int = 0) -> DatasetBundle:
    """Assign train/test per patient, independently within each dataset."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    assignment: dict[tuple[str, str], str] = {}
    for ds in bundle.dataset_ids:
        patients = sorted({r.patient_id for r in bundle.records if r.dataset_id == ds})
        if len(patients) == 1:
            warnings.warn(f"dataset {ds!r} has a single patient; assigned to train",
                          stacklevel=2)
        n_train = max(1, _round_half_up(train_fraction * len(patients)))
        order = rng.permutation(len(patients))
        for rank, i in enumerate(order):
            assignment[(ds, patients[i])] = "train" if rank < n_train else "test"
    records = tuple(replace(r, split=assignment[r.patient_key]) for r in bundle.records)
    return DatasetBundle(records, bundle.embeddings, bundle.domains)


def class_weights(labels: Sequence[int] | np.ndarray, K: int) -> np.ndarray:
    """Inverse-frequency weights ``1 / (K * p_k)``; all ones when balanced."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=K)[:K]
    if labels.size == 0 or np.any(counts == 0) or labels.max() >= K:
        absent = [k for k in range(K) if k >= counts.size or counts[k] == 0]
        raise DataError(f"classes absent from training labels: {absent}")
    return labels.size / (K * counts.astype(np.float64))


def kfold_indices(records: Sequence[SampleRecord], k: int = 3, seed: int = 0) -> list[np.ndarray]:
    """Split record indices into ``k`` folds of whole patients."""
    patients = sorted({r.patient_key for r in records})
    if len(patients) < k:
        raise DataError(f"need at least {k} patients for {k}-fold CV, have {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    fold_of = {}
    for f, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            fold_of[patients[i]] = f
    folds: list[list[int]] = [[] for _ in range(k)]
    for i, r in enumerate(records):
        folds[fold_of[r.patient_key]].append(i)
    return [np.array(f, dtype=np.int64) for f in folds]


# -- images ------------------------------------------------------------------

def _constant_runs(lines: np.ndarray) -> tuple[int, int]:
    """Length of the constant-line runs at the start and end of ``lines``."""
    const = np.all(lines == lines[:, :1], axis=1)
    if const.all():
        return 0, 0  # pure stripes: no non-constant line to stop at
    head = int(np.argmin(const))
    tail = int(np.argmin(const[::-1]))
    return head, tail


def preprocess_image(gray: np.ndarray, threshold: int = 40) -> np.ndarray:
    """Zero sub-threshold pixels, then trim constant rows/columns from the edges.

    Each pass trims, from all four edges of the current view, the run of
    constant rows or columns up to the first non-constant one; passes repeat
    until nothing changes, so the result is a fixpoint (idempotent). Interior
    constant lines are kept. A pass that would leave no foreground is not
    applied. A uniform non-zero block is returned as is; an image with no
    pixel at or above ``threshold`` raises.
    """
    img = np.array(gray, copy=True)
    if img.ndim != 2 or img.size == 0:
        raise DataError("image must be a non-empty 2-D matrix")
    img[img < threshold] = 0
    if not np.any(img):
        raise DataError("no foreground")
    while True:
        if np.all(img == img.flat[0]):
            break
        top, bottom = _constant_runs(img)
        left, right = _constant_runs(img.T)
        if top == bottom == left == right == 0:
            break
        cropped = img[top:img.shape[0] - bottom, left:img.shape[1] - right]
        if not np.any(cropped):
            # trimming opposite edges together can swallow a corner-only foreground
            break
        img = cropped
    return img.copy()


def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise HeaderError(f"{path}: not a P2/P5 PGM file")
    (width, height, maxval), pos = _pgm_tokens(data[2:], 3)
    pos += 2
    dtype = np.uint8 if maxval < 256 else np.uint16
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        be = ">u1" if maxval < 256 else ">u2"
        count = width * height
        if len(data) - pos < count * np.dtype(be).itemsize:
            raise HeaderError(f"{path}: truncated P5 payload")
        arr = np.frombuffer(data, dtype=be, count=count, offset=pos)
    else:
        arr = np.array(data[pos:].split(), dtype=np.int64)
        if arr.size < width * height:
            raise HeaderError(f"{path}: truncated P2 payload")
        arr = arr[: width * height]
    return arr.reshape(height, width).astype(dtype)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    maxval = 255 if img.max(initial=0) < 256 else 65535
    payload = img.astype(">u1" if maxval == 255 else ">u2").tobytes()
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(payload)
