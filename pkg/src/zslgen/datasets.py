"""Dataset containers, on-disk formats, validation, and toy data.

On-disk layout (all little endian):

* feature / attribute / label files: 4-byte ASCII magic (``ZSLF`` for
  features, ``ZSLA`` for attributes, ``ZSLL`` for labels), u16 version
  (1), u16 reserved (0), u32 rows, u32 cols, then the payload row-major.
  Features and attributes store f32; labels store u32 class ids with
  cols fixed at 1.
* split files: plain text with lines ``seen: 0,1,2`` and ``unseen: 3,4``.

Values are widened to float64 in memory so downstream arithmetic matches
the rest of the package; persisting is the only place precision drops.
Loaded datasets are immutable and safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC_FEATURES = b"ZSLF"
MAGIC_ATTRIBUTES = b"ZSLA"
MAGIC_LABELS = b"ZSLL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class DataError(Exception):
    """Malformed file, inconsistent dataset, or bad request."""


@dataclass(frozen=True)
class FeatureTable:
    """One visual feature vector per image, n_images x feat_dim."""

    values: np.ndarray

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AttributeTable:
    """One semantic attribute vector per class, n_classes x attr_dim."""

    values: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]


@dataclass(frozen=True)
class Dataset:
    features: FeatureTable
    labels: np.ndarray  # int64, one class id per image
    attributes: AttributeTable
    split: SplitSpec

    @property
    def n_images(self) -> int:
        return self.features.n_images

    @property
    def feat_dim(self) -> int:
        return self.features.feat_dim

    @property
    def attr_dim(self) -> int:
        return self.attributes.attr_dim

    @property
    def n_classes(self) -> int:
        return self.attributes.n_classes


# ---------------------------------------------------------------------------
# Binary and CSV I/O
# ---------------------------------------------------------------------------


def _check_matrix(values: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"{what}: non-finite value at ({r}, {c})")


def save_binary(obj, path) -> None:
    """Write a FeatureTable, AttributeTable, or label vector."""
    if isinstance(obj, FeatureTable):
        magic, payload = MAGIC_FEATURES, obj.values.astype("<f4")
    elif isinstance(obj, AttributeTable):
        magic, payload = MAGIC_ATTRIBUTES, obj.values.astype("<f4")
    else:
        labels = np.asarray(obj)
        if labels.ndim != 1:
            raise DataError(f"labels must be 1-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise DataError("labels must be non-negative")
        magic, payload = MAGIC_LABELS, labels.astype("<u4").reshape(-1, 1)
    rows, cols = payload.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, 0, rows, cols))
        fh.write(payload.tobytes())


def load_binary(path):
    """Read a table written by :func:`save_binary`; kind follows the magic."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, _reserved, rows, cols = _HEADER.unpack_from(raw)
    if magic not in (MAGIC_FEATURES, MAGIC_ATTRIBUTES, MAGIC_LABELS):
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    count = rows * cols
    if count > 2**31:
        raise DataError(f"{path}: dimension overflow ({rows} x {cols})")
    itemsize = 4
    expected = _HEADER.size + count * itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {count * itemsize}")
    if magic == MAGIC_LABELS:
        if cols != 1:
            raise DataError(f"{path}: label files must have cols=1, got {cols}")
        return np.frombuffer(raw, dtype="<u4", offset=_HEADER.size).astype(np.int64)
    values = (
        np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        .reshape(rows, cols)
        .astype(np.float64)
    )
    _check_matrix(values, str(path))
    if magic == MAGIC_FEATURES:
        return FeatureTable(values)
    return AttributeTable(values)


def load_csv(path, kind: str):
    """Comma-separated alternative to the binary path.

    ``kind`` is one of features / attributes / labels. Cells are parsed as
    f32 and widened, so a CSV written from binary data round-trips within
    f32 precision.
    """
    if kind not in ("features", "attributes", "labels"):
        raise DataError(f"unknown csv kind '{kind}'")
    rows = []
    arity = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if arity is None:
                arity = len(cells)
            elif len(cells) != arity:
                raise DataError(f"{path}:{lineno}: ragged row ({len(cells)} cells, expected {arity})")
            parsed = []
            for col, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(np.float32(cell)))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric cell at column {col}: {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no rows")
    values = np.array(rows, dtype=np.float64)
    _check_matrix(values, str(path))
    if kind == "labels":
        if values.shape[1] != 1:
            raise DataError(f"{path}: label csv must have one column")
        return values[:, 0].astype(np.int64)
    if kind == "features":
        return FeatureTable(values)
    return AttributeTable(values)


def save_split(split: SplitSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seen: " + ",".join(str(c) for c in split.seen) + "\n")
        fh.write("unseen: " + ",".join(str(c) for c in split.unseen) + "\n")


def load_split(path) -> SplitSpec:
    seen = unseen = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise DataError(f"{path}:{lineno}: expected 'seen:' or 'unseen:' line")
            key, _, rest = line.partition(":")
            ids = tuple(int(tok) for tok in rest.split(",") if tok.strip() != "")
            if key.strip() == "seen":
                seen = ids
            elif key.strip() == "unseen":
                unseen = ids
            else:
                raise DataError(f"{path}:{lineno}: unknown split key {key.strip()!r}")
    if seen is None or unseen is None:
        raise DataError(f"{path}: split file needs both seen and unseen lines")
    return SplitSpec(seen=seen, unseen=unseen)


def load_dataset(features_path, attributes_path, labels_path, split_path) -> Dataset:
    features = load_binary(features_path)
    attributes = load_binary(attributes_path)
    labels = load_binary(labels_path)
    if not isinstance(features, FeatureTable):
        raise DataError(f"{features_path}: expected a feature file")
    if not isinstance(attributes, AttributeTable):
        raise DataError(f"{attributes_path}: expected an attribute file")
    if not isinstance(labels, np.ndarray):
        raise DataError(f"{labels_path}: expected a label file")
    ds = Dataset(features=features, labels=labels, attributes=attributes, split=load_split(split_path))
    ensure_valid(ds)
    return ds


def save_dataset(ds: Dataset, features_path, attributes_path, labels_path, split_path) -> None:
    save_binary(ds.features, features_path)
    save_binary(ds.attributes, attributes_path)
    save_binary(ds.labels, labels_path)
    save_split(ds.split, split_path)


# ---------------------------------------------------------------------------
# Validation, subsetting, toy data
# ---------------------------------------------------------------------------


def validate(ds: Dataset) -> list[str]:
    """Collect every invariant violation; an empty list means ok."""
    problems = []
    if ds.labels.ndim != 1 or ds.labels.shape[0] != ds.features.n_images:
        problems.append(
            f"labels has {ds.labels.shape[0]} entries for {ds.features.n_images} images"
        )
    if not np.isfinite(ds.features.values).all():
        problems.append("features contain non-finite values")
    if not np.isfinite(ds.attributes.values).all():
        problems.append("attributes contain non-finite values")
    n_classes = ds.attributes.n_classes
    out_of_range = np.unique(ds.labels[(ds.labels < 0) | (ds.labels >= n_classes)])
    for label in out_of_range:
        problems.append(f"label {label} out of range for {n_classes} classes")
    seen, unseen = set(ds.split.seen), set(ds.split.unseen)
    overlap = seen & unseen
    if overlap:
        problems.append(f"classes in both seen and unseen: {sorted(overlap)}")
    present = set(int(c) for c in np.unique(ds.labels))
    uncovered = present - (seen | unseen)
    if uncovered:
        problems.append(f"labels not covered by the split: {sorted(uncovered)}")
    counts = np.bincount(ds.labels[(ds.labels >= 0) & (ds.labels < n_classes)], minlength=n_classes)
    empty_seen = [c for c in sorted(seen) if 0 <= c < n_classes and counts[c] == 0]
    if empty_seen:
        problems.append(f"seen classes without images: {empty_seen}")
    return problems


def ensure_valid(ds: Dataset) -> Dataset:
    problems = validate(ds)
    if problems:
        raise DataError("invalid dataset: " + "; ".join(problems))
    return ds


def subset_by_classes(ds: Dataset, class_set) -> Dataset:
    """Dataset restricted to images of the given classes.

    Attribute table and split are kept as is; only images are filtered.
    """
    wanted = set(int(c) for c in class_set)
    known = set(range(ds.n_classes))
    unknown = wanted - known
    if unknown:
        raise DataError(f"unknown class ids: {sorted(unknown)}")
    mask = np.isin(ds.labels, sorted(wanted))
    return Dataset(
        features=FeatureTable(ds.features.values[mask]),
        labels=ds.labels[mask],
        attributes=ds.attributes,
        split=ds.split,
    )


def make_toy_dataset(
    n_seen: int,
    n_unseen: int,
    attr_dim: int,
    feat_dim: int,
    per_class: int,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Synthetic benchmark: features are a fixed random linear map of the
    class attributes plus Gaussian noise. Deterministic for a given seed."""
    if min(n_seen, n_unseen, attr_dim, feat_dim, per_class) < 1:
        raise DataError("all toy dataset counts must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n_classes = n_seen + n_unseen
    attrs = rng.uniform(0.0, 1.0, size=(n_classes, attr_dim))
    lin_map = rng.normal(0.0, 1.0 / np.sqrt(attr_dim), size=(attr_dim, feat_dim))
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    features = attrs[labels] @ lin_map
    if noise_sigma > 0:
        features = features + rng.normal(0.0, noise_sigma, size=features.shape)
    return Dataset(
        features=FeatureTable(features),
        labels=labels,
        attributes=AttributeTable(attrs),
        split=SplitSpec(seen=tuple(range(n_seen)), unseen=tuple(range(n_seen, n_classes))),
    )
