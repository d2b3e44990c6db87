"""Dataset ingestion, feature encoding, vertical splitting and synthetic data.

Randomness uses numpy's PCG64 (``np.random.default_rng``). Streams that must
agree between modules (the feature partition) are derived from the seed with
a fixed spawn key, so the same seed always gives the same partition no matter
who asks for it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EncodeError, LoadError, SplitError

ROLES = ("numeric", "categorical", "label", "ignore")

_FEATURE_STREAM = 1
_SAMPLE_STREAM = 2


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


# -- schema -------------------------------------------------------------------


@dataclass
class Column:
    name: str
    role: str
    vocabulary: Optional[List[str]] = None
    # categorical only: "error" rejects unseen values, "bucket" maps them to an extra slot
    unknown: str = "error"

    @property
    def width(self) -> int:
        if self.role == "numeric":
            return 1
        if self.role == "categorical":
            return len(self.vocabulary) + (self.unknown == "bucket")
        return 0


@dataclass
class DatasetSchema:
    name: str
    columns: List[Column]
    label_map: Dict[str, int] = field(default_factory=dict)
    default_label: Optional[int] = None
    header: bool = False

    def __post_init__(self):
        labels = [c for c in self.columns if c.role == "label"]
        if len(labels) > 1:
            raise ConfigurationError(f"schema {self.name}: more than one label column")
        for c in self.columns:
            if c.role not in ROLES:
                raise ConfigurationError(f"schema {self.name}: column {c.name} has unknown role {c.role!r}")
            if c.role == "categorical" and not c.vocabulary:
                raise ConfigurationError(f"schema {self.name}: categorical column {c.name} lists no values")
            if c.unknown not in ("error", "bucket"):
                raise ConfigurationError(f"schema {self.name}: bad unknown policy {c.unknown!r}")
        for v in list(self.label_map.values()) + ([self.default_label] if self.default_label is not None else []):
            if v not in (-1, 1):
                raise ConfigurationError(f"schema {self.name}: label values must be -1 or +1")

    @property
    def label_column(self) -> Optional[Column]:
        return next((c for c in self.columns if c.role == "label"), None)

    def feature_names(self) -> List[str]:
        names = []
        for c in self.columns:
            if c.role == "numeric":
                names.append(c.name)
            elif c.role == "categorical":
                names.extend(f"{c.name}={v}" for v in c.vocabulary)
                if c.unknown == "bucket":
                    names.append(f"{c.name}=<other>")
        return names

    def map_label(self, raw: str) -> int:
        key = raw.strip()
        if key in self.label_map:
            return self.label_map[key]
        if key.rstrip(".") in self.label_map:
            return self.label_map[key.rstrip(".")]
        if self.default_label is not None:
            return self.default_label
        raise ValueError(f"label {raw!r} has no mapping")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        cols = [
            Column(c["name"], c["role"], c.get("vocabulary"), c.get("unknown", "error"))
            for c in d["columns"]
        ]
        return cls(
            d["name"], cols, {str(k): int(v) for k, v in d.get("label_map", {}).items()},
            d.get("default_label"), bool(d.get("header", False)),
        )

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        with open(path) as f:
            return cls.from_dict(json.load(f))


BUNDLED_SCHEMAS = ("kdd", "nslkdd", "unsw", "nbaiot")


def bundled_schema(name: str) -> DatasetSchema:
    """One of the shipped schemas: ``kdd``, ``nslkdd``, ``unsw`` or ``nbaiot``."""
    key = name.lower().replace("-", "").replace("_", "")
    if key not in BUNDLED_SCHEMAS:
        raise ConfigurationError(f"no bundled schema {name!r}; have {', '.join(BUNDLED_SCHEMAS)}")
    text = resources.files("fedxfer.schemas").joinpath(f"{key}.json").read_text()
    return DatasetSchema.from_dict(json.loads(text))


def load_schema(ref: str) -> DatasetSchema:
    """Schema from a JSON path, or a bundled schema name."""
    if Path(ref).exists():
        return DatasetSchema.from_json(ref)
    return bundled_schema(ref)


# -- loading ------------------------------------------------------------------


@dataclass
class RawTable:
    schema: DatasetSchema
    columns: Dict[str, list]
    n_rows: int
    rejects: List[tuple] = field(default_factory=list)


def load_csv(path, schema: DatasetSchema, max_reject_frac: float = 0.01) -> RawTable:
    """Parse a comma-separated file against ``schema``.

    Rows with the wrong field count, an unparsable number or an unmapped label
    are collected in ``rejects`` as ``(line_number, reason)``. Loading fails
    when the rejected fraction reaches ``max_reject_frac``.
    """
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: no such file")
    cols = schema.columns
    out = {c.name: [] for c in cols if c.role != "ignore"}
    rejects, total = [], 0
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.header:
                names = [r.strip() for r in row]
                if len(names) != len(cols):
                    raise LoadError(
                        f"{path}: header has {len(names)} columns, schema {schema.name} has {len(cols)}"
                    )
                continue
            if not row or all(not v.strip() for v in row):
                continue
            total += 1
            if len(row) != len(cols):
                rejects.append((lineno, f"{len(row)} fields, expected {len(cols)}"))
                continue
            try:
                parsed = {}
                for c, v in zip(cols, row):
                    if c.role == "numeric":
                        x = float(v)
                        if not math.isfinite(x):
                            raise ValueError(f"{c.name}: non-finite value {v!r}")
                        parsed[c.name] = x
                    elif c.role == "categorical":
                        parsed[c.name] = v.strip()
                    elif c.role == "label":
                        parsed[c.name] = schema.map_label(v)
            except ValueError as e:
                rejects.append((lineno, str(e)))
                continue
            for k, v in parsed.items():
                out[k].append(v)
    if total == 0:
        raise LoadError(f"{path}: no data rows")
    if len(rejects) == total and all("fields, expected" in r[1] for r in rejects):
        raise LoadError(f"{path}: no row matches the {len(cols)} columns of schema {schema.name}")
    if len(rejects) / total >= max_reject_frac:
        lines = ", ".join(str(r[0]) for r in rejects[:20])
        raise LoadError(f"{path}: {len(rejects)} of {total} rows rejected (lines {lines})")
    return RawTable(schema, out, total - len(rejects), rejects)


# -- encoding -----------------------------------------------------------------


@dataclass(frozen=True)
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x) -> "MinMaxScaler":
        return cls(x.min(axis=0), x.max(axis=0))

    def transform(self, x) -> np.ndarray:
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (x - self.lo) / safe, 0.0)
        # rows outside the fitted range are clipped to keep every column in [0, 1]
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    x: np.ndarray
    y: Optional[np.ndarray]
    feature_names: List[str]
    name: str = ""
    scaler: Optional[MinMaxScaler] = None

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.feature_names + (["label"] if self.y is not None else []))
            for i, row in enumerate(self.x):
                vals = [repr(float(v)) for v in row]
                if self.y is not None:
                    vals.append(str(int(self.y[i])))
                w.writerow(vals)

    @classmethod
    def from_csv(cls, path, name="") -> "EncodedDataset":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        has_label = header[-1] == "label"
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
        if has_label:
            return cls(arr[:, :-1].copy(), arr[:, -1].astype(np.int8), header[:-1], name)
        return cls(arr, None, header, name)


def encode_features(raw: RawTable, scaler: Optional[MinMaxScaler] = None,
                    fit_rows=None) -> EncodedDataset:
    """One-hot categoricals over the schema vocabulary, min-max the numerics.

    The numeric scaler is fitted on ``fit_rows`` (default: every row) unless a
    previously fitted ``scaler`` is given. Constant columns encode to 0.
    """
    schema = raw.schema
    n = raw.n_rows
    numeric_cols = [c for c in schema.columns if c.role == "numeric"]
    num = np.array([raw.columns[c.name] for c in numeric_cols], dtype=np.float64).T.reshape(n, len(numeric_cols))
    if scaler is None:
        fit = num if fit_rows is None else num[np.asarray(fit_rows)]
        if fit.shape[0] == 0:
            raise EncodeError("cannot fit the scaler on zero rows")
        scaler = MinMaxScaler.fit(fit)
    num = scaler.transform(num)
    blocks, k = [], 0
    for c in schema.columns:
        if c.role == "numeric":
            blocks.append(num[:, k:k + 1])
            k += 1
        elif c.role == "categorical":
            index = {v: i for i, v in enumerate(c.vocabulary)}
            onehot = np.zeros((n, c.width))
            for r, v in enumerate(raw.columns[c.name]):
                j = index.get(v)
                if j is None:
                    if c.unknown != "bucket":
                        raise EncodeError(f"column {c.name}: value {v!r} not in vocabulary")
                    j = len(c.vocabulary)
                onehot[r, j] = 1.0
            blocks.append(onehot)
    x = np.hstack(blocks) if blocks else np.zeros((n, 0))
    label = schema.label_column
    y = np.array(raw.columns[label.name], dtype=np.int8) if label is not None else None
    return EncodedDataset(np.ascontiguousarray(x), y, schema.feature_names(), schema.name, scaler)


# -- vertical split -----------------------------------------------------------


def feature_partition(d: int, seed: int):
    """Seeded shuffle of ``range(d)``: first ceil(d/2) to A, the rest to B."""
    if d < 2:
        raise SplitError(f"need at least 2 features to split, got {d}")
    perm = _rng(seed, _FEATURE_STREAM).permutation(d)
    half = (d + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def overlap_count(n_labeled: int, n_unlabeled: int, overlap_frac: float) -> int:
    # round half up; Python's round() would go to even
    return int(math.floor(overlap_frac * min(n_labeled, n_unlabeled) + 0.5))


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Which rows and columns each party sees.

    ``samples_a`` / ``samples_b`` are dataset row indices in each party's
    local order; ``overlap_a[i]`` and ``overlap_b[i]`` are positions in those
    lists that refer to the same dataset row.
    """

    features_a: np.ndarray
    features_b: np.ndarray
    samples_a: np.ndarray
    samples_b: np.ndarray
    overlap_a: np.ndarray
    overlap_b: np.ndarray
    seed: int

    @property
    def n_overlap(self) -> int:
        return self.overlap_a.size

    def __eq__(self, other):
        if not isinstance(other, SplitPlan):
            return NotImplemented
        names = ("features_a", "features_b", "samples_a", "samples_b", "overlap_a", "overlap_b")
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in names
        )

    def party_a_view(self, ds: EncodedDataset):
        """``(x_a, y_a)`` for party A."""
        if ds.y is None:
            raise SplitError("party A needs a labeled dataset")
        rows = self.samples_a
        return ds.x[np.ix_(rows, self.features_a)], ds.y[rows].astype(np.int8)

    def party_b_view(self, ds: EncodedDataset) -> np.ndarray:
        """Party B's features only; labels never leave the sealed record."""
        return ds.x[np.ix_(self.samples_b, self.features_b)]

    def eval_positions(self) -> np.ndarray:
        """Positions in B's list that are not overlap samples."""
        mask = np.ones(self.samples_b.size, dtype=bool)
        mask[self.overlap_b] = False
        return np.flatnonzero(mask)

    def sealed_b_labels(self, ds: EncodedDataset) -> np.ndarray:
        """Ground truth for B's rows, for scoring only."""
        if ds.y is None:
            raise SplitError("dataset has no labels to seal")
        return ds.y[self.samples_b].astype(np.int8)


def vertical_split(ds: EncodedDataset, n_labeled: int, n_unlabeled: int,
                   overlap_frac: float = 0.10, seed: int = 0) -> SplitPlan:
    n, d = ds.x.shape
    if n_labeled < 1 or n_unlabeled < 1:
        raise SplitError("both parties need at least one sample")
    if not 0 <= overlap_frac <= 1:
        raise SplitError(f"overlap_frac must lie in [0, 1], got {overlap_frac}")
    m = overlap_count(n_labeled, n_unlabeled, overlap_frac)
    if n_labeled + n_unlabeled - m > n:
        raise SplitError(
            f"{n_labeled} labeled + {n_unlabeled} unlabeled - {m} shared rows exceeds {n} samples"
        )
    fa, fb = feature_partition(d, seed)
    rng = _rng(seed, _SAMPLE_STREAM)
    rows = rng.permutation(n)[: n_labeled + n_unlabeled - m]
    shared = rows[:m]
    samples_a = rng.permutation(np.concatenate([shared, rows[m:n_labeled]]))
    samples_b = rng.permutation(np.concatenate([shared, rows[n_labeled:]]))
    pos_a = {int(r): i for i, r in enumerate(samples_a)}
    pos_b = {int(r): i for i, r in enumerate(samples_b)}
    shared_sorted = np.sort(shared)
    overlap_a = np.array([pos_a[int(r)] for r in shared_sorted], dtype=np.int64)
    overlap_b = np.array([pos_b[int(r)] for r in shared_sorted], dtype=np.int64)
    return SplitPlan(fa, fb, samples_a, samples_b, overlap_a, overlap_b, int(seed))


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Two Gaussian classes; party B's features additionally carry noise.

    B's noise has two parts scaled by ``sigma_b``: isotropic Gaussian noise and
    a label-independent two-regime shift of size ``regime_shift * sigma_b``
    along a direction orthogonal to the class signal. The shift is what a
    label-free clusterer latches onto.
    """

    n: int = 2000
    d: int = 20
    sep: float = 7.0
    sigma_b: float = 1.0
    regime_shift: float = 4.0


SYNTHETIC_PRESETS = {
    "weak-target": SyntheticSpec(),
    "easy": SyntheticSpec(sep=8.0, sigma_b=0.0),
    "no-signal": SyntheticSpec(sep=0.0),
}

# sizes (n_labeled, n_unlabeled) and overlap fraction per preset
PRESET_SPLITS = {
    "weak-target": (1100, 1000, 0.10),
    "easy": (1100, 1000, 0.10),
    "no-signal": (1100, 1000, 0.10),
}

CASE_PRESETS = {"CASE1": (9577, 2000), "CASE2": (47893, 10000)}


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> EncodedDataset:
    """Draw a labeled dataset for ``spec``; the same seed gives the same bytes.

    The noisy columns are exactly party B's columns under
    ``feature_partition(spec.d, seed)``.
    """
    n, d = spec.n, spec.d
    if n < 4 or d < 2:
        raise ConfigurationError(f"synthetic data needs n >= 4 and d >= 2, got n={n}, d={d}")
    if spec.sep < 0 or spec.sigma_b < 0 or spec.regime_shift < 0:
        raise ConfigurationError("sep, sigma_b and regime_shift must be >= 0")
    fa, fb = feature_partition(d, seed)
    rng = _rng(seed, 3)
    y = np.where(rng.permutation(n) < n // 2, 1, -1).astype(np.int8)
    # unit class direction with half its energy in each party's columns
    direction = rng.normal(size=d)
    for part in (fa, fb):
        direction[part] /= np.linalg.norm(direction[part]) * math.sqrt(2.0)
    x = rng.normal(size=(n, d)) + np.outer(y * (spec.sep / 2.0), direction)
    if spec.sigma_b > 0 and fb.size:
        shift = rng.normal(size=fb.size)
        signal_b = direction[fb]
        if fb.size > 1 and np.linalg.norm(signal_b) > 0:
            shift -= (shift @ signal_b) / (signal_b @ signal_b) * signal_b
        shift /= np.linalg.norm(shift)
        regime = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        noise = rng.normal(size=(n, fb.size)) + np.outer(regime * spec.regime_shift, shift)
        x[:, fb] += spec.sigma_b * noise
    scaler = MinMaxScaler.fit(x)
    return EncodedDataset(
        np.ascontiguousarray(scaler.transform(x)), y, [f"f{j}" for j in range(d)], "synthetic", scaler
    )
