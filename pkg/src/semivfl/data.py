"""Tabular ingestion, vertical partitioning, hashing, and dual batch streams.

The active party (A) owns the label and one side of the field split; the
passive party (B) owns the other side. Rows split into overlapped (both
parties), non-overlapped (A only) and test sets, with a held-out validation
slice carved from each training split.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

VAL_FRACTION = 1.0 / 20.0


class DataError(ValueError):
    """Raised for malformed input files or invalid schema/partition requests."""


class SingleClassError(ValueError):
    """Raised when a split or batch carries only one label class where both are required."""


@dataclass
class FieldSpec:
    """One input field: hashing space, embedding width, and (numeric) bucketing."""

    name: str
    kind: str = "categorical"  # categorical | numeric
    buckets: int = 1000
    dim: int = 8
    quantile_buckets: int = 64  # numeric fields only

    def validate(self):
        if self.kind not in ("categorical", "numeric"):
            raise DataError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.buckets < 2:
            raise DataError(f"field {self.name!r}: bucket count must be >= 2, got {self.buckets}")
        if self.dim < 1:
            raise DataError(f"field {self.name!r}: embedding dim must be >= 1")


@dataclass
class Schema:
    """Field descriptors plus the left/right split and which side is active."""

    fields: list[FieldSpec]
    label: str
    left: list[str]
    right: list[str]
    active_side: str = "left"

    def __post_init__(self):
        self.validate()

    def validate(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DataError("duplicate field names in schema")
        for f in self.fields:
            f.validate()
        if self.label in names:
            raise DataError(f"label column {self.label!r} must not be listed as a field")
        if self.active_side not in ("left", "right"):
            raise DataError(f"active side must be 'left' or 'right', got {self.active_side!r}")
        left, right = set(self.left), set(self.right)
        both = left & right
        if both:
            raise DataError(f"fields assigned to both parties: {sorted(both)}")
        if self.label in left or self.label in right:
            raise DataError(f"label column {self.label!r} must not be assigned to a party")
        missing = set(names) - left - right
        if missing:
            raise DataError(f"fields not assigned to any party: {sorted(missing)}")
        unknown = (left | right) - set(names)
        if unknown:
            raise DataError(f"party lists name unknown fields: {sorted(unknown)}")

    def _by_name(self):
        return {f.name: f for f in self.fields}

    @property
    def party_a_fields(self) -> list[FieldSpec]:
        by = self._by_name()
        side = self.left if self.active_side == "left" else self.right
        return [by[n] for n in side]

    @property
    def party_b_fields(self) -> list[FieldSpec]:
        by = self._by_name()
        side = self.right if self.active_side == "left" else self.left
        return [by[n] for n in side]

    def to_dict(self) -> dict:
        return {
            "fields": [vars(f).copy() for f in self.fields],
            "label": self.label,
            "left": list(self.left),
            "right": list(self.right),
            "active_side": self.active_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            fields=[FieldSpec(**f) for f in d["fields"]],
            label=d["label"],
            left=list(d["left"]),
            right=list(d["right"]),
            active_side=d.get("active_side", "left"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RawTable:
    """Typed columns straight from disk; categorical None marks a missing value."""

    n_rows: int
    categorical: dict[str, list]
    numeric: dict[str, np.ndarray]
    labels: np.ndarray


def load_table(path, schema: Schema) -> RawTable:
    """Read a delimited text file with header into typed columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = {f.name for f in schema.fields} | {schema.label}
        extra = [c for c in header if c not in expected]
        if extra:
            raise DataError(f"{path}: unknown column(s) {extra}")
        missing = sorted(expected - set(header))
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        col_of = {name: i for i, name in enumerate(header)}

        categorical = {f.name: [] for f in schema.fields if f.kind == "categorical"}
        numeric_cols = {f.name: [] for f in schema.fields if f.kind == "numeric"}
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} values, got {len(row)}")
            raw_label = row[col_of[schema.label]].strip()
            try:
                y = float(raw_label)
            except ValueError:
                raise DataError(f"{path}:{line_no}: unparseable label {raw_label!r}") from None
            if y not in (0.0, 1.0):
                raise DataError(f"{path}:{line_no}: label must be 0 or 1, got {raw_label!r}")
            labels.append(y)
            for name, col in categorical.items():
                v = row[col_of[name]].strip()
                col.append(v if v != "" else None)
            for name, col in numeric_cols.items():
                v = row[col_of[name]].strip()
                if v == "":
                    col.append(0.0)  # missing numeric -> 0.0
                else:
                    try:
                        col.append(float(v))
                    except ValueError:
                        raise DataError(f"{path}:{line_no}: unparseable numeric {name}={v!r}") from None

    return RawTable(
        n_rows=len(labels),
        categorical=categorical,
        numeric={k: np.asarray(v, dtype=np.float64) for k, v in numeric_cols.items()},
        labels=np.asarray(labels, dtype=np.float64),
    )


@dataclass
class PartyViews:
    """Raw per-party column groups after a vertical field split."""

    a_fields: list[str]
    b_fields: list[str]
    active_side: str


def vertical_partition(table: RawTable, left_fields, right_fields, active_side="left") -> PartyViews:
    """Split fields into parties; the active side becomes party A (label owner)."""
    left, right = list(left_fields), list(right_fields)
    overlap = set(left) & set(right)
    if overlap:
        raise DataError(f"fields listed for both parties: {sorted(overlap)}")
    all_fields = set(table.categorical) | set(table.numeric)
    listed = set(left) | set(right)
    if listed != all_fields:
        missing = sorted(all_fields - listed)
        unknown = sorted(listed - all_fields)
        raise DataError(f"party lists must cover the fields exactly (missing {missing}, unknown {unknown})")
    if active_side not in ("left", "right"):
        raise DataError(f"active side must be 'left' or 'right', got {active_side!r}")
    if active_side == "left":
        return PartyViews(a_fields=left, b_fields=right, active_side="left")
    return PartyViews(a_fields=right, b_fields=left, active_side="right")


def hash_field(field_id: str, raw_value, bucket_count: int) -> int:
    """Stable 64-bit hash of (field, value) into [1, bucket_count-1]; missing -> 0."""
    if raw_value is None or raw_value == "":
        return 0
    digest = hashlib.blake2b(f"{field_id}\x1f{raw_value}".encode(), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (bucket_count - 1)


def _hash_column(field_id, values, bucket_count):
    cache = {}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if v in cache:
            out[i] = cache[v]
        else:
            out[i] = cache[v] = hash_field(field_id, v, bucket_count)
    return out


@dataclass
class Encoder:
    """Quantile boundaries for numeric fields, fit once per table."""

    boundaries: dict[str, list] = field(default_factory=dict)

    @classmethod
    def fit(cls, table: RawTable, schema: Schema) -> "Encoder":
        enc = cls()
        for f in schema.fields:
            if f.kind == "numeric":
                qs = np.linspace(0, 1, f.quantile_buckets + 1)[1:-1]
                enc.boundaries[f.name] = np.unique(np.quantile(table.numeric[f.name], qs)).tolist()
        return enc

    def encode_field(self, spec: FieldSpec, table: RawTable) -> np.ndarray:
        """Hash one field's raw column into bucket indices."""
        if spec.kind == "categorical":
            return _hash_column(spec.name, table.categorical[spec.name], spec.buckets)
        edges = np.asarray(self.boundaries[spec.name])
        buckets = np.searchsorted(edges, table.numeric[spec.name], side="right")
        return _hash_column(spec.name, [f"q{b}" for b in buckets], spec.buckets)

    def to_dict(self):
        return {"boundaries": self.boundaries}

    @classmethod
    def from_dict(cls, d):
        return cls(boundaries=dict(d["boundaries"]))


@dataclass
class SplitIndices:
    """Row-index membership per split: the partition manifest."""

    fed_train: np.ndarray
    fed_val: np.ndarray
    loc_train: np.ndarray
    loc_val: np.ndarray
    test: np.ndarray

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.int64) for k, v in d.items()})


def overlap_split(n_rows: int, n_overlap: int, n_nonoverlap: int, n_test: int, seed: int) -> SplitIndices:
    """Deterministic shuffle, then contiguous assignment into the three splits.

    The leading 1/20 of each training split is reserved for validation.
    """
    needed = n_overlap + n_nonoverlap + n_test
    if needed > n_rows:
        raise DataError(
            f"split sizes {n_overlap}+{n_nonoverlap}+{n_test}={needed} exceed available rows {n_rows}"
        )
    perm = np.random.default_rng(seed).permutation(n_rows)
    fed = perm[:n_overlap]
    loc = perm[n_overlap:n_overlap + n_nonoverlap]
    test = perm[n_overlap + n_nonoverlap:needed]
    n_fed_val = int(n_overlap * VAL_FRACTION)
    n_loc_val = int(n_nonoverlap * VAL_FRACTION)
    return SplitIndices(
        fed_train=np.sort(fed[n_fed_val:]),
        fed_val=np.sort(fed[:n_fed_val]),
        loc_train=np.sort(loc[n_loc_val:]),
        loc_val=np.sort(loc[:n_loc_val]),
        test=np.sort(test),
    )


@dataclass
class SplitArrays:
    """Hashed feature matrices and labels for one split."""

    xa: np.ndarray            # (n, m_A) int64 bucket indices
    xb: np.ndarray | None     # (n, m_B) or None where party B is absent
    y: np.ndarray             # (n,) float64 in {0, 1}
    rows: np.ndarray          # original row indices

    @property
    def n(self):
        return self.y.shape[0]


@dataclass
class PartitionedDataset:
    """All five row splits plus the schema and encoder that produced them."""

    schema: Schema
    encoder: Encoder
    fed_train: SplitArrays
    fed_val: SplitArrays
    loc_train: SplitArrays
    loc_val: SplitArrays
    test: SplitArrays
    indices: SplitIndices

    def splits(self):
        return {
            "fed_train": self.fed_train,
            "fed_val": self.fed_val,
            "loc_train": self.loc_train,
            "loc_val": self.loc_val,
            "test": self.test,
        }


def build_partitioned(table: RawTable, schema: Schema, indices: SplitIndices,
                      encoder: Encoder | None = None) -> PartitionedDataset:
    """Hash-encode the table and materialize every split's party views.

    x_B columns are erased from the non-overlapped splits; the test split
    keeps x_B so the teacher can be evaluated on it.
    """
    encoder = encoder or Encoder.fit(table, schema)
    xa_cols = [encoder.encode_field(f, table) for f in schema.party_a_fields]
    xb_cols = [encoder.encode_field(f, table) for f in schema.party_b_fields]
    xa = np.stack(xa_cols, axis=1) if xa_cols else np.zeros((table.n_rows, 0), dtype=np.int64)
    xb = np.stack(xb_cols, axis=1) if xb_cols else np.zeros((table.n_rows, 0), dtype=np.int64)
    y = table.labels

    def view(rows, with_b):
        return SplitArrays(
            xa=xa[rows], xb=xb[rows] if with_b else None, y=y[rows], rows=np.asarray(rows),
        )

    return PartitionedDataset(
        schema=schema,
        encoder=encoder,
        fed_train=view(indices.fed_train, True),
        fed_val=view(indices.fed_val, True),
        loc_train=view(indices.loc_train, False),
        loc_val=view(indices.loc_val, False),
        test=view(indices.test, True),
        indices=indices,
    )


def _class_check(y, what):
    if not ((y == 1).any() and (y == 0).any()):
        raise SingleClassError(f"{what} contains a single label class")


def _chunk_batches(indices, y, batch_size, rng):
    """Shuffled batches with the both-classes-present rule.

    A single-class chunk is merged with the next one; a trailing single-class
    remainder is folded into the previously emitted batch.
    """
    order = rng.permutation(len(indices))
    batches = []
    pending = []
    for start in range(0, len(order), batch_size):
        pending.extend(order[start:start + batch_size])
        sel = indices[pending]
        if (y[sel] == 1).any() and (y[sel] == 0).any():
            batches.append(np.asarray(sel))
            pending = []
    if pending:
        tail = indices[pending]
        if batches:
            batches[-1] = np.concatenate([batches[-1], tail])
        else:
            batches.append(np.asarray(tail))
    return batches


@dataclass
class BatchPair:
    """One step's overlapped and non-overlapped batches."""

    xa_o: np.ndarray
    xb_o: np.ndarray
    y_o: np.ndarray
    xa_n: np.ndarray
    y_n: np.ndarray
    has_duplicates: bool = False


class OverlappedStream:
    """Per-epoch shuffled batches over one split, obeying the class rule."""

    def __init__(self, split: SplitArrays, batch_size: int, seed: int):
        if batch_size < 2:
            raise DataError(f"batch size must be >= 2, got {batch_size}")
        _class_check(split.y, "overlapped split")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, epoch_idx: int):
        rng = np.random.default_rng((self.seed, 7, epoch_idx))
        all_idx = np.arange(self.split.n)
        for sel in _chunk_batches(all_idx, self.split.y, self.batch_size, rng):
            yield sel


class BatchPairStream:
    """Dual stream: the overlapped split defines an epoch, the non-overlapped
    stream recycles (reshuffling) until the overlapped stream is exhausted."""

    def __init__(self, fed: SplitArrays, loc: SplitArrays, n_o: int, n_n: int, seed: int):
        if n_o < 2 or n_n < 2:
            raise DataError(f"batch sizes must be >= 2, got {n_o}/{n_n}")
        _class_check(fed.y, "overlapped split")
        _class_check(loc.y, "non-overlapped split")
        self.fed = fed
        self.loc = loc
        self.n_o = n_o
        self.n_n = n_n
        self.seed = seed

    def _non_overlap_chunks(self, epoch_idx):
        cycle = 0
        while True:
            rng = np.random.default_rng((self.seed, 13, epoch_idx, cycle))
            order = rng.permutation(self.loc.n)
            for start in range(0, self.loc.n, self.n_n):
                yield order[start:start + self.n_n]
            cycle += 1

    def epoch(self, epoch_idx: int):
        rng = np.random.default_rng((self.seed, 7, epoch_idx))
        fed_idx = np.arange(self.fed.n)
        chunks = self._non_overlap_chunks(epoch_idx)
        for sel_o in _chunk_batches(fed_idx, self.fed.y, self.n_o, rng):
            sel_n = []
            while True:
                sel_n.extend(next(chunks))
                need_more = len(sel_n) < self.n_n
                yn = self.loc.y[np.asarray(sel_n)]
                if not need_more and (yn == 1).any() and (yn == 0).any():
                    break
            sel_n = np.asarray(sel_n)
            dupes = len(np.unique(sel_n)) < len(sel_n)
            yield BatchPair(
                xa_o=self.fed.xa[sel_o],
                xb_o=self.fed.xb[sel_o],
                y_o=self.fed.y[sel_o],
                xa_n=self.loc.xa[sel_n],
                y_n=self.loc.y[sel_n],
                has_duplicates=dupes,
            )
