"""Tabular data handling: CSV ingestion, one-hot encoding, min-max scaling,
known/unknown splits, the synthetic Gaussian-cluster generator and the
binary ``NEGM`` dataset container.
"""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import make_rng

KINDS = ("numeric", "categorical", "binary")
MAGIC = b"NEGM"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed input data or an impossible request against it."""


class FormatError(DataError):
    """A container file has the wrong magic, version or length."""


# KDD Cup 99 column layout (41 features + label).
KDD99_COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root", "num_file_creations",
    "num_shells", "num_access_files", "num_outbound_cmds", "is_host_login",
    "is_guest_login", "count", "srv_count", "serror_rate", "srv_serror_rate",
    "rerror_rate", "srv_rerror_rate", "same_srv_rate", "diff_srv_rate",
    "srv_diff_host_rate", "dst_host_count", "dst_host_srv_count",
    "dst_host_same_srv_rate", "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate", "dst_host_srv_serror_rate",
    "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]
# The binary flags are one-hot encoded too; with the 10% KDD99 file
# (3 protocols, 66 services, 11 flags) this yields 121 columns.
KDD99_CATEGORICAL = [
    "protocol_type", "service", "flag", "land", "logged_in", "is_host_login", "is_guest_login",
]


def kdd99_schema():
    """Column kinds for the KDD99 CSV layout; the label column is ``label``."""
    schema = {c: "numeric" for c in KDD99_COLUMNS}
    for c in KDD99_CATEGORICAL:
        schema[c] = "categorical"
    schema["label"] = "categorical"
    return schema


KDD99_DROP_POLICY = {"columns": [], "drop_constant": False}


@dataclass
class RawTable:
    columns: list
    kinds: dict
    rows: list
    label_column: str

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    @property
    def feature_columns(self):
        return [c for c in self.columns if c != self.label_column]


@dataclass
class FeatureMatrix:
    data: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)
    columns: list | None = None
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError("data must be 2-D")
        self.labels = np.asarray(self.labels).astype(str)
        if len(self.labels) != self.data.shape[0]:
            raise DataError("labels length must equal row count")
        if not self.class_names:
            self.class_names = list(dict.fromkeys(self.labels.tolist()))
        if self.row_ids is None:
            self.row_ids = np.arange(self.data.shape[0])

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        present = set(self.labels[idx].tolist())
        return FeatureMatrix(
            self.data[idx],
            self.labels[idx],
            [c for c in self.class_names if c in present],
            self.columns,
            self.row_ids[idx],
        )


def load_csv(path, schema, label_column="label"):
    """Read a headered CSV into a :class:`RawTable`.

    ``schema`` maps column name to ``numeric``/``categorical``/``binary``.
    When the file has no header row matching the schema (raw KDD dumps are
    headerless) the schema order is used as the header.
    """
    schema = dict(schema)
    for name, kind in schema.items():
        if kind not in KINDS:
            raise DataError(f"column {name!r}: unknown kind {kind!r}")
    if label_column not in schema:
        raise DataError(f"label column {label_column!r} missing from schema")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        first = [c.strip() for c in first]
        if set(first) & set(schema):
            header = first
            pending = []
        else:
            header = list(schema)
            pending = [first]
        missing = [c for c in schema if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        cols = [c for c in header if c in schema]
        pos = [header.index(c) for c in cols]
        rows = []
        for lineno, raw in enumerate(pending + list(reader), start=1 if pending else 2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(raw)} cells, expected {len(header)}")
            row = []
            for c, j in zip(cols, pos):
                cell = raw[j].strip()
                if c == label_column:
                    row.append(cell.rstrip("."))
                    continue
                if schema[c] == "categorical":
                    row.append(cell)
                    continue
                try:
                    row.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: cannot parse {cell!r} at row {lineno}, column {c!r}"
                    ) from None
            rows.append(row)
    return RawTable(cols, {c: schema[c] for c in cols}, rows, label_column)


class Encoder:
    """One-hot encoder fitted on a training table.

    Categorical columns expand to one indicator per training category; numeric
    and binary columns pass through.  Columns named in the drop policy are
    removed, as are (optionally) columns that are constant after encoding.
    """

    def __init__(self, drop_columns=(), drop_constant=True):
        self.drop_columns = list(drop_columns)
        self.drop_constant = drop_constant
        self.categories = {}
        self.output_columns = None
        self.unseen_count = 0

    def fit(self, table: RawTable):
        unknown = [c for c in self.drop_columns if c not in table.columns]
        if unknown:
            raise DataError(f"drop list names unknown column(s) {unknown}")
        self.source_columns = [
            c for c in table.feature_columns if c not in self.drop_columns
        ]
        self.kinds = {c: table.kinds[c] for c in self.source_columns}
        for c in self.source_columns:
            if self.kinds[c] == "categorical":
                self.categories[c] = sorted(set(table.column(c)))
        self.output_columns = self._layout()
        self._keep = None
        if self.drop_constant:
            full = self._expand(table)
            self._keep = np.flatnonzero(full.max(axis=0) > full.min(axis=0)) if len(full) else None
            if self._keep is not None:
                self.output_columns = [self.output_columns[j] for j in self._keep]
        return self

    def _layout(self):
        out = []
        for c in self.source_columns:
            if self.kinds[c] == "categorical":
                out.extend(f"{c}={v}" for v in self.categories[c])
            else:
                out.append(c)
        return out

    def _expand(self, table):
        n = len(table)
        blocks = []
        unseen = 0
        for c in self.source_columns:
            j = table.columns.index(c)
            vals = [r[j] for r in table.rows]
            if self.kinds[c] == "categorical":
                cats = self.categories[c]
                lookup = {v: i for i, v in enumerate(cats)}
                block = np.zeros((n, len(cats)))
                for i, v in enumerate(vals):
                    k = lookup.get(v)
                    if k is None:
                        unseen += 1
                    else:
                        block[i, k] = 1.0
                blocks.append(block)
            else:
                blocks.append(np.asarray(vals, dtype=np.float64).reshape(n, 1))
        self._last_unseen = unseen
        return np.hstack(blocks) if blocks else np.zeros((n, 0))

    def transform(self, table: RawTable) -> FeatureMatrix:
        if self.output_columns is None:
            raise DataError("encoder is not fitted")
        missing = [c for c in self.source_columns if c not in table.columns]
        if missing:
            raise DataError(f"table lacks column(s) {missing}")
        full = self._expand(table)
        if self._last_unseen:
            self.unseen_count += self._last_unseen
            warnings.warn(
                f"{self._last_unseen} unseen categorical value(s) encoded as all-zero blocks",
                stacklevel=2,
            )
        if self._keep is not None:
            full = full[:, self._keep]
        labels = table.column(table.label_column)
        return FeatureMatrix(full, labels, columns=list(self.output_columns))


def encode(table: RawTable, drop_policy=None):
    """Fit an :class:`Encoder` on ``table`` and return ``(matrix, encoder)``.

    ``drop_policy`` is ``{"columns": [...], "drop_constant": bool}``.
    """
    drop_policy = drop_policy or {}
    enc = Encoder(drop_policy.get("columns", ()), drop_policy.get("drop_constant", True))
    enc.fit(table)
    return enc.transform(table), enc


class Normalizer:
    """Per-column min-max map onto [-1, 1]; out-of-range values are clipped."""

    def __init__(self, lo=None, hi=None):
        self.lo = None if lo is None else np.asarray(lo, dtype=np.float64)
        self.hi = None if hi is None else np.asarray(hi, dtype=np.float64)

    @property
    def fitted(self):
        return self.lo is not None

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.lo = x.min(axis=0)
        self.hi = x.max(axis=0)
        return self

    def _span(self):
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0)

    def transform(self, x):
        if not self.fitted:
            raise DataError("normalizer is not fitted")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.lo.shape[0]:
            raise DataError(f"expected {self.lo.shape[0]} columns, got {x.shape[1]}")
        y = 2.0 * (x - self.lo) / self._span() - 1.0
        return np.clip(y, -1.0, 1.0)

    def inverse(self, y):
        if not self.fitted:
            raise DataError("normalizer is not fitted")
        return (np.asarray(y, dtype=np.float64) + 1.0) / 2.0 * self._span() + self.lo

    def apply(self, fm: FeatureMatrix) -> FeatureMatrix:
        return FeatureMatrix(self.transform(fm.data), fm.labels, list(fm.class_names), fm.columns, fm.row_ids)


def normalize(train: FeatureMatrix):
    norm = Normalizer().fit(train.data)
    return norm.apply(train), norm


@dataclass
class SplitSpec:
    known_classes: list
    unknown_classes: list
    known_test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.known_classes = [str(c) for c in self.known_classes]
        self.unknown_classes = [str(c) for c in self.unknown_classes]
        if set(self.known_classes) & set(self.unknown_classes):
            raise DataError("known and unknown classes overlap")
        if not self.known_classes:
            raise DataError("at least one known class is required")
        if not 0.0 < self.known_test_fraction < 1.0:
            raise DataError("known_test_fraction must lie in (0, 1)")


def build_splits(data: FeatureMatrix, spec: SplitSpec, shuffle_test=True):
    """Train on a fraction of each known class; test on the rest plus every
    unknown-class row.  Classes named in neither list are left out.

    The test rows are shuffled (seeded) to form the online stream.
    """
    rng = make_rng(spec.seed)
    present = set(data.labels.tolist())
    absent = [c for c in spec.known_classes + spec.unknown_classes if c not in present]
    if absent:
        raise DataError(f"class(es) not in data: {absent}")
    train_idx, test_idx = [], []
    for c in spec.known_classes:
        rows = np.flatnonzero(data.labels == c)
        if len(rows) < 5:
            raise DataError(f"known class {c!r} has {len(rows)} instances; need >= 5")
        rows = rng.permutation(rows)
        n_test = int(round(spec.known_test_fraction * len(rows)))
        test_idx.append(rows[:n_test])
        train_idx.append(rows[n_test:])
    for c in spec.unknown_classes:
        test_idx.append(np.flatnonzero(data.labels == c))
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.concatenate(test_idx)
    test_idx = rng.permutation(test_idx) if shuffle_test else np.sort(test_idx)
    train = data.subset(train_idx)
    train.class_names = list(spec.known_classes)
    test = data.subset(test_idx)
    return train, test


@dataclass
class SyntheticSpec:
    n_clusters: int = 16
    per_cluster: int = 625
    dim: int = 121
    scale_range: tuple = (0.5, 1.5)
    separation: float = 10.0
    noise_fraction: float = 0.05
    noise_multiplier: float = 9.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise DataError("n_clusters must be >= 2")
        if self.per_cluster < 1 or self.dim < 1:
            raise DataError("per_cluster and dim must be >= 1")
        if not self.noise_multiplier > 1.0:
            raise DataError("noise_multiplier must be > 1")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise DataError("noise_fraction must lie in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise DataError("scale_range must be positive and ordered")


def synthetic_parameters(spec: SyntheticSpec):
    """Cluster means and per-axis standard deviations for ``spec``.

    Means are drawn uniformly in a cube and rescaled so the closest pair of
    means is ``separation`` times the mean cluster radius ``||std||``.
    """
    rng = make_rng([spec.seed, 1])
    scales = rng.uniform(*spec.scale_range, size=(spec.n_clusters, spec.dim))
    means = rng.uniform(-1.0, 1.0, size=(spec.n_clusters, spec.dim))
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    radius = np.linalg.norm(scales, axis=1).mean()
    means *= spec.separation * radius / dist.min()
    return means, scales


def generate_synthetic(spec: SyntheticSpec) -> FeatureMatrix:
    """Anisotropic Gaussian clusters with homocentric high-variance noise.

    A ``noise_fraction`` share of each cluster is drawn with the same mean but
    variance scaled by ``noise_multiplier``.  Labels are cluster indices.
    """
    means, scales = synthetic_parameters(spec)
    rng = make_rng([spec.seed, 2])
    n = spec.per_cluster
    n_noise = int(round(spec.noise_fraction * n))
    blocks, labels = [], []
    for k in range(spec.n_clusters):
        std = np.tile(scales[k], (n, 1))
        std[n - n_noise:] *= np.sqrt(spec.noise_multiplier)
        blocks.append(means[k] + rng.standard_normal((n, spec.dim)) * std)
        labels.extend([str(k)] * n)
    return FeatureMatrix(
        np.vstack(blocks),
        labels,
        [str(k) for k in range(spec.n_clusters)],
        [f"f{j}" for j in range(spec.dim)],
    )


def save_matrix(fm: FeatureMatrix, path):
    """Write the ``NEGM`` container: magic, u32 version, u64 rows/cols,
    row-major float64 data, then u32-length-prefixed UTF-8 labels."""
    rows, cols = fm.data.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQ", FORMAT_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(fm.data, dtype="<f8").tobytes())
        for lab in fm.labels.tolist():
            b = lab.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)


def load_matrix(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a NEGM dataset (bad magic)")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    version, rows, cols = struct.unpack_from("<IQQ", raw, 4)
    if version > FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off = 24
    nbytes = rows * cols * 8
    if len(raw) < off + nbytes:
        raise FormatError(f"{path}: truncated data block")
    data = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
    off += nbytes
    labels = []
    for _ in range(rows):
        if len(raw) < off + 4:
            raise FormatError(f"{path}: truncated labels")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if len(raw) < off + n:
            raise FormatError(f"{path}: truncated labels")
        labels.append(raw[off:off + n].decode("utf-8"))
        off += n
    return FeatureMatrix(data, labels)
