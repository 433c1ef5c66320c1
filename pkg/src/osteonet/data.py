"""Dataset ingestion, balancing, stratified splitting, merging, and batching.

A dataset on disk is one directory per class of PNG/JPEG files. The
manifest is the in-memory (and on-disk, tab-separated) record of every
sample: path, class, source dataset, and split assignment. All random
decisions (undersampling, split shuffles, batch order, augmentation
draws) derive from the manifest seed, so any operation re-run with the
same inputs reproduces identical assignments.

Processing order is fixed: balance before splitting, split before
augmenting — the only order that keeps held-out data untouched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .preprocessing import AugmentPolicy, augment, ingest_file
from .rng import Rng
from .tensor import Tensor

BINARY_CLASSES = ("Normal", "Osteoporosis")
MULTI_CLASSES = ("Normal", "Osteopenia", "Osteoporosis")
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class SampleRecord:
    path: str
    class_label: int
    source: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    class_names: tuple[str, ...]
    seed: int

    def counts(self) -> list[int]:
        out = [0] * len(self.class_names)
        for r in self.records:
            out[r.class_label] += 1
        return out

    def split_records(self, split: str) -> list[SampleRecord]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]


def load_manifest(root_dir: str, class_names, source: str | None = None,
                  seed: int = 0) -> DatasetManifest:
    """One record per image file under root/<class>/, sorted by path."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root_dir!r} is not a directory")
    class_names = tuple(class_names)
    if len(class_names) not in (2, 3):
        raise DatasetError(f"expected 2 or 3 classes, got {len(class_names)}")
    source = source if source is not None else root.name

    records: list[SampleRecord] = []
    for label, name in enumerate(class_names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory {str(class_dir)!r}")
        files = sorted(
            str(p) for p in class_dir.rglob("*")
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DatasetError(f"class directory {str(class_dir)!r} holds no images")
        records.extend(SampleRecord(path=f, class_label=label, source=source) for f in files)
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records=records, class_names=class_names, seed=seed)


def balance_classes(manifest: DatasetManifest, rng: Rng) -> DatasetManifest:
    """Random undersampling of majority classes to the minority count."""
    counts = manifest.counts()
    if any(c < 1 for c in counts):
        raise DatasetError(f"every class needs at least one sample, got {counts}")
    target = min(counts)
    kept: list[SampleRecord] = []
    for label in range(len(manifest.class_names)):
        class_records = [r for r in manifest.records if r.class_label == label]
        if len(class_records) > target:
            idx = rng.derive("balance", label).gen.choice(
                len(class_records), size=target, replace=False)
            class_records = [class_records[i] for i in sorted(idx)]
        kept.extend(class_records)
    kept.sort(key=lambda r: r.path)
    return DatasetManifest(records=kept, class_names=manifest.class_names, seed=manifest.seed)


def _largest_remainder(n: int, fractions) -> list[int]:
    # seats go to the largest fractional remainders; ties to the earlier split
    exact = [n * f for f in fractions]
    base = [int(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def stratified_split(manifest: DatasetManifest, fractions=(0.6, 0.2, 0.2),
                     rng: Rng | None = None) -> DatasetManifest:
    """Per-class shuffle + largest-remainder partition into train/val/test.

    Every class must be able to populate all three splits (>= 3 samples);
    a zero allotment is repaired by moving one sample from the largest
    split, so each split always receives at least one sample per class.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {fractions}")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DatasetError(f"expected three nonnegative fractions, got {fractions}")
    rng = rng if rng is not None else Rng(manifest.seed)

    assigned: list[SampleRecord] = []
    for label in range(len(manifest.class_names)):
        class_records = [r for r in manifest.records if r.class_label == label]
        n = len(class_records)
        if n < 3:
            raise DatasetError(
                f"class {manifest.class_names[label]!r} has {n} samples; "
                "need >= 3 to populate train/val/test"
            )
        sizes = _largest_remainder(n, fractions)
        while min(sizes) == 0:
            sizes[sizes.index(min(sizes))] += 1
            sizes[sizes.index(max(sizes))] -= 1
        perm = rng.derive("split", label).gen.permutation(n)
        shuffled = [class_records[i] for i in perm]
        offset = 0
        for split, size in zip(SPLITS, sizes):
            assigned.extend(replace(r, split=split) for r in shuffled[offset:offset + size])
            offset += size
    assigned.sort(key=lambda r: r.path)
    return DatasetManifest(records=assigned, class_names=manifest.class_names,
                           seed=manifest.seed)


def merge_datasets(manifests: list[DatasetManifest]) -> DatasetManifest:
    """Concatenate manifests, lifting binary labels into a multi-class vocabulary.

    Compatible inputs either share one class list or are all subsets (by
    name) of the largest one; anything else is a vocabulary conflict.
    """
    if not manifests:
        raise DatasetError("nothing to merge")
    if len(manifests) == 1:
        return manifests[0]
    target = max((m.class_names for m in manifests), key=len)
    for m in manifests:
        if not set(m.class_names) <= set(target):
            raise DatasetError(
                f"class vocabulary {m.class_names} conflicts with {target}"
            )
    records: list[SampleRecord] = []
    for m in manifests:
        remap = {i: target.index(name) for i, name in enumerate(m.class_names)}
        records.extend(replace(r, class_label=remap[r.class_label]) for r in m.records)
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records=records, class_names=target, seed=manifests[0].seed)


def one_hot(labels, num_classes: int) -> np.ndarray:
    eye = np.eye(num_classes, dtype=np.float32)
    return eye[np.asarray(labels, dtype=np.int64)]


def batch_iter(manifest: DatasetManifest, split: str, batch_size: int = 32,
               shuffle: bool = True, rng: Rng | None = None, epoch: int = 0,
               image_hw: tuple[int, int] = (224, 224),
               augment_policy: AugmentPolicy | None = None):
    """Yield (images, one-hot labels) batches covering the split exactly once.

    The final batch may be short. Shuffle order is a pure function of
    (manifest seed, epoch); augmentation applies only to the train split
    and draws a per-sample stream from (seed, epoch, record index), so
    batches are reproducible no matter how they are consumed.
    """
    records = manifest.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} is empty")
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    rng = rng if rng is not None else Rng(manifest.seed)
    order = list(range(len(records)))
    if shuffle:
        order = list(rng.derive("shuffle", epoch).gen.permutation(len(records)))

    h, w = image_hw
    apply_aug = split == "train" and augment_policy is not None and augment_policy.enabled
    num_classes = len(manifest.class_names)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        images = np.empty((len(chunk), h, w, 3), dtype=np.float32)
        labels = np.empty(len(chunk), dtype=np.int64)
        for row, idx in enumerate(chunk):
            record = records[idx]
            img = ingest_file(record.path, h, w)
            if apply_aug:
                img = augment(img, augment_policy, rng.derive("augment", epoch, idx))
            images[row] = img.data
            labels[row] = record.class_label
        yield Tensor(images), Tensor(one_hot(labels, num_classes))


# ---------------------------------------------------------------------------
# manifest persistence (tab-separated, one record per line)


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# osteonet-manifest v1\n")
        fh.write(f"# classes: {','.join(manifest.class_names)}\n")
        fh.write(f"# seed: {manifest.seed}\n")
        for r in manifest.records:
            fh.write(f"{r.path}\t{manifest.class_names[r.class_label]}\t{r.source}\t{r.split}\n")


def load_manifest_file(path: str) -> DatasetManifest:
    if not os.path.isfile(path):
        raise DatasetError(f"manifest file {path!r} does not exist")
    class_names: tuple[str, ...] | None = None
    seed = 0
    records: list[SampleRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("classes:"):
                    class_names = tuple(c.strip() for c in body[len("classes:"):].split(","))
                elif body.startswith("seed:"):
                    seed = int(body[len("seed:"):].strip())
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetError(f"{path}:{line_no}: expected 4 tab-separated fields")
            if class_names is None:
                raise DatasetError(f"{path}: missing '# classes:' header")
            p, cname, source, split = parts
            if cname not in class_names:
                raise DatasetError(f"{path}:{line_no}: unknown class {cname!r}")
            if split not in SPLITS + ("unassigned",):
                raise DatasetError(f"{path}:{line_no}: unknown split {split!r}")
            records.append(SampleRecord(path=p, class_label=class_names.index(cname),
                                        source=source, split=split))
    if class_names is None:
        raise DatasetError(f"{path}: missing '# classes:' header")
    return DatasetManifest(records=records, class_names=class_names, seed=seed)
