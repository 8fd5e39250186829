"""Tabular ingestion, encoding and member/non-member splitting."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: tuple[str, ...] | None = None

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind}
        if self.categories is not None:
            out["categories"] = list(self.categories)
        return out


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        seen = set()
        for col in self.columns:
            if not col.name:
                raise SchemaError("column names must be non-empty")
            if col.name in seen:
                raise SchemaError(f"duplicate column name {col.name!r}")
            seen.add(col.name)
            if col.kind not in (NUMERICAL, CATEGORICAL):
                raise SchemaError(f"column {col.name!r}: unknown kind {col.kind!r}")
            if col.kind == CATEGORICAL:
                cats = col.categories or ()
                if len(cats) < 2:
                    raise SchemaError(f"categorical column {col.name!r} needs at least 2 categories")
                if len(set(cats)) != len(cats):
                    raise SchemaError(f"categorical column {col.name!r} repeats a category")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @classmethod
    def from_dict(cls, obj) -> "TableSchema":
        cols = obj["columns"] if isinstance(obj, dict) else obj
        columns = []
        for c in cols:
            cats = c.get("categories")
            columns.append(Column(str(c["name"]), str(c["kind"]),
                                  tuple(str(x) for x in cats) if cats is not None else None))
        return cls(tuple(columns))

    def to_dict(self):
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def load(cls, path) -> "TableSchema":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"schema file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Dataset:
    """Validated raw table. Numerical cells are floats, categorical cells strings."""

    schema: TableSchema
    rows: list[list]

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def take(self, indices) -> "Dataset":
        return Dataset(self.schema, [self.rows[i] for i in indices])


def _parse_row(schema, cells, lineno):
    if len(cells) != len(schema.columns):
        raise DataError(f"row {lineno}: expected {len(schema.columns)} cells, got {len(cells)}")
    out = []
    for col, cell in zip(schema.columns, cells):
        if col.kind == NUMERICAL:
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"row {lineno}, column {col.name!r}: cannot parse {cell!r} as a number") from None
            if not math.isfinite(value):
                raise DataError(f"row {lineno}, column {col.name!r}: non-finite value {cell!r}")
            out.append(value)
        else:
            if cell not in col.categories:
                raise DataError(f"row {lineno}, column {col.name!r}: unknown category {cell!r}")
            out.append(cell)
    return out


def load_table(path, schema: TableSchema) -> Dataset:
    """Read a comma-separated file whose header matches ``schema`` in order.

    Row numbers in error messages count data rows from 1 (header excluded).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != schema.names:
            raise SchemaError(f"header mismatch in {path}: expected {schema.names}, got {header}")
        rows = [_parse_row(schema, [c.strip() for c in cells], i)
                for i, cells in enumerate(reader, start=1) if cells]
    return Dataset(schema, rows)


def write_table(path, data: Dataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(data.schema.names)
        for row in data.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# encoding


@dataclass
class Transform:
    """Fitted per-column statistics.

    ``means``/``stds`` are keyed by numerical column name; categorical columns
    appear in ``categorical`` only when they were included at fit time.
    """

    schema: TableSchema
    include_categorical: bool
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    @property
    def column_map(self) -> list[str]:
        out = []
        for col in self.schema.columns:
            if col.kind == NUMERICAL:
                out.append(col.name)
            elif self.include_categorical:
                out.extend([col.name] * len(col.categories))
        return out

    @property
    def dim(self) -> int:
        return len(self.column_map)

    def to_dict(self):
        return {
            "schema": self.schema.to_dict(),
            "include_categorical": self.include_categorical,
            "means": self.means,
            "stds": self.stds,
        }

    @classmethod
    def from_dict(cls, obj) -> "Transform":
        return cls(TableSchema.from_dict(obj["schema"]), bool(obj["include_categorical"]),
                   {k: float(v) for k, v in obj["means"].items()},
                   {k: float(v) for k, v in obj["stds"].items()})


@dataclass
class EncodedMatrix:
    values: np.ndarray
    transform: Transform

    @property
    def column_map(self) -> list[str]:
        return self.transform.column_map


def fit_encode(data: Dataset, include_categorical: bool = False) -> EncodedMatrix:
    """Z-score numerical columns (population std) and one-hot categoricals."""
    if data.n_rows == 0:
        raise DataError("cannot fit an encoding on an empty dataset")
    transform = Transform(data.schema, include_categorical)
    for j, col in enumerate(data.schema.columns):
        if col.kind != NUMERICAL:
            continue
        values = np.array([row[j] for row in data.rows], dtype=np.float64)
        mean = float(values.mean())
        std = float(np.sqrt(np.mean((values - mean) ** 2)))
        if std == 0.0:
            raise DataError(f"numerical column {col.name!r} has zero variance")
        transform.means[col.name] = mean
        transform.stds[col.name] = std
    return apply_encode(transform, data)


def apply_encode(transform: Transform, data: Dataset) -> EncodedMatrix:
    if data.schema != transform.schema:
        raise SchemaError("dataset schema does not match the fitted transform")
    n = data.n_rows
    blocks = []
    unseen = 0
    for j, col in enumerate(data.schema.columns):
        if col.kind == NUMERICAL:
            values = np.array([row[j] for row in data.rows], dtype=np.float64).reshape(n)
            blocks.append(((values - transform.means[col.name]) / transform.stds[col.name])[:, None])
        elif transform.include_categorical:
            index = {c: k for k, c in enumerate(col.categories)}
            block = np.zeros((n, len(col.categories)))
            for i, row in enumerate(data.rows):
                k = index.get(row[j])
                if k is None:
                    unseen += 1
                else:
                    block[i, k] = 1.0
            blocks.append(block)
    if unseen:
        logger.warning("%d cells held categories unseen by the transform; encoded as all-zeros", unseen)
    values = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return EncodedMatrix(values, transform)


def decode(transform: Transform, values: np.ndarray) -> Dataset:
    """Map encoded rows back to raw cells.

    Categorical blocks decode by argmax, ties going to the lowest index.
    Categorical columns dropped at fit time cannot be recovered and decode to
    their first category.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != transform.dim:
        raise DataError(f"expected encoded width {transform.dim}, got shape {values.shape}")
    columns = []
    pos = 0
    for col in transform.schema.columns:
        if col.kind == NUMERICAL:
            columns.append((values[:, pos] * transform.stds[col.name] + transform.means[col.name]).tolist())
            pos += 1
        elif transform.include_categorical:
            k = len(col.categories)
            idx = np.argmax(values[:, pos:pos + k], axis=1)
            columns.append([col.categories[i] for i in idx])
            pos += k
        else:
            columns.append([col.categories[0]] * values.shape[0])
    rows = [list(r) for r in zip(*columns)] if columns else []
    return Dataset(transform.schema, rows)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitAssignment:
    member_indices: list[int]
    nonmember_indices: list[int]
    seed: int

    def to_dict(self):
        return {"seed": self.seed, "member_indices": self.member_indices,
                "nonmember_indices": self.nonmember_indices}

    @classmethod
    def from_dict(cls, obj) -> "SplitAssignment":
        return cls([int(i) for i in obj["member_indices"]],
                   [int(i) for i in obj["nonmember_indices"]], int(obj["seed"]))


def split_members(data: Dataset | int, member_fraction: float, seed: int) -> SplitAssignment:
    """Seeded permutation split; the first ``floor(fraction * n)`` rows are members."""
    n = data if isinstance(data, int) else data.n_rows
    if not 0.0 < member_fraction < 1.0:
        raise ValueError(f"member_fraction must lie in (0, 1), got {member_fraction}")
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_member = int(math.floor(member_fraction * n))
    return SplitAssignment(sorted(int(i) for i in perm[:n_member]),
                           sorted(int(i) for i in perm[n_member:]), seed)


def subsample(data: Dataset, n_target: int, seed: int) -> Dataset:
    if n_target <= 0:
        raise ValueError(f"n_target must be positive, got {n_target}")
    if n_target > data.n_rows:
        raise ValueError(f"n_target={n_target} exceeds the {data.n_rows} available rows")
    idx = np.random.default_rng(seed).choice(data.n_rows, size=n_target, replace=False)
    return data.take(sorted(int(i) for i in idx))


# ---------------------------------------------------------------------------
# synthetic demo table


def synthetic_schema(n_numerical: int = 5, n_categories: int = 3) -> TableSchema:
    cols = [Column(f"num_{i}", NUMERICAL) for i in range(n_numerical)]
    cols.append(Column("cat_0", CATEGORICAL, tuple(chr(ord("a") + k) for k in range(n_categories))))
    return TableSchema(tuple(cols))


def make_synthetic_table(n_rows: int, seed: int, n_numerical: int = 5,
                         n_categories: int = 3) -> Dataset:
    """Mixed-type table: a categorical latent class drives correlated numerics.

    With the defaults the one-hot encoding has ``5 + 3 = 8`` dimensions.
    """
    rng = np.random.default_rng(seed)
    schema = synthetic_schema(n_numerical, n_categories)
    centers = np.random.default_rng(12345).normal(0.0, 2.0, size=(n_categories, n_numerical))
    mixing = np.random.default_rng(54321).normal(0.0, 0.5, size=(n_numerical, n_numerical))
    cls = rng.integers(0, n_categories, size=n_rows)
    z = rng.normal(size=(n_rows, n_numerical))
    x = centers[cls] + z + np.tanh(z) @ mixing
    x[:, 0] = np.round(x[:, 0] * 3.0) / 3.0
    cats = schema.columns[-1].categories
    rows = [[float(v) for v in x[i]] + [cats[cls[i]]] for i in range(n_rows)]
    return Dataset(schema, rows)


def save_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def as_dataset(schema: TableSchema, rows: Sequence[Sequence]) -> Dataset:
    """Validate in-memory rows the same way :func:`load_table` validates a file."""
    return Dataset(schema, [_parse_row(schema, [str(c) if not isinstance(c, float) else repr(c)
                                                 for c in r], i) for i, r in enumerate(rows, start=1)])
