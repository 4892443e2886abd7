"""Typed tabular data: covariate schema, datasets, seeded sampling and CSV I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Invalid or malformed input data."""


class SchemaMismatchError(DataError):
    """Covariate layout differs from the one a model was trained on."""


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = CONTINUOUS
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise DataError("covariate names must be non-empty")
        if self.kind == CONTINUOUS:
            if self.levels:
                raise DataError(f"continuous covariate {self.name!r} cannot declare levels")
        elif self.kind == CATEGORICAL:
            levels = tuple(str(v) for v in self.levels)
            object.__setattr__(self, "levels", levels)
            if len(levels) < 2:
                raise DataError(f"categorical covariate {self.name!r} needs at least 2 levels")
            if len(set(levels)) != len(levels):
                raise DataError(f"categorical covariate {self.name!r} has duplicate levels")
        else:
            raise DataError(f"unknown covariate kind {self.kind!r}")

    @property
    def width(self) -> int:
        return len(self.levels) if self.kind == CATEGORICAL else 1

    def column_names(self) -> list[str]:
        if self.kind == CATEGORICAL:
            return [f"{self.name}={lvl}" for lvl in self.levels]
        return [self.name]


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariates; categoricals expand to one indicator per level."""

    entries: tuple[Covariate, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")

    @classmethod
    def continuous(cls, names: Iterable[str]) -> "CovariateSchema":
        return cls(tuple(Covariate(n) for n in names))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def width(self) -> int:
        return sum(e.width for e in self.entries)

    def column_names(self) -> list[str]:
        return [c for e in self.entries for c in e.column_names()]

    def column_groups(self) -> dict[str, np.ndarray]:
        """Map each covariate name to the indices of its expanded columns."""
        groups, start = {}, 0
        for e in self.entries:
            groups[e.name] = np.arange(start, start + e.width)
            start += e.width
        return groups

    def column_owner(self) -> np.ndarray:
        """Index of the owning covariate for every expanded column."""
        return np.repeat(np.arange(len(self.entries)), [e.width for e in self.entries])

    def expand(self, raw: dict[str, Sequence]) -> np.ndarray:
        """Build the expanded numeric matrix from raw per-covariate columns.

        Continuous columns must be numeric; categorical columns hold level
        labels (anything whose ``str`` matches a declared level).
        """
        n = None
        blocks = []
        for e in self.entries:
            col = raw[e.name]
            if n is None:
                n = len(col)
            elif len(col) != n:
                raise DataError(f"column {e.name!r} has length {len(col)}, expected {n}")
            if e.kind == CONTINUOUS:
                blocks.append(np.asarray(col, dtype=float).reshape(-1, 1))
            else:
                lookup = {lvl: k for k, lvl in enumerate(e.levels)}
                codes = np.empty(len(col), dtype=np.intp)
                for i, v in enumerate(col):
                    try:
                        codes[i] = lookup[str(v)]
                    except KeyError:
                        raise DataError(
                            f"row {i + 1}, column {e.name!r}: unknown level {v!r}"
                        ) from None
                blocks.append(np.eye(e.width)[codes])
        if not blocks:
            return np.zeros((0 if n is None else n, 0))
        return np.hstack(blocks)

    def to_json(self) -> str:
        out = []
        for e in self.entries:
            item = {"name": e.name, "kind": e.kind}
            if e.kind == CATEGORICAL:
                item["levels"] = list(e.levels)
            out.append(item)
        return json.dumps({"covariates": out}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CovariateSchema":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"schema file is not valid JSON: {exc}") from None
        items = doc["covariates"] if isinstance(doc, dict) else doc
        return cls(
            tuple(
                Covariate(it["name"], it.get("kind", CONTINUOUS), tuple(it.get("levels", ())))
                for it in items
            )
        )

    @classmethod
    def read(cls, path: str | Path) -> "CovariateSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates, outcome and binary treatment for ``n`` units.

    ``x`` is the expanded matrix (categoricals as indicator columns).
    ``propensity`` defaults to the treated share of the sample.
    ``ids`` carries the row labels through subsetting.
    """

    schema: CovariateSchema
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    propensity: float | np.ndarray | None = None
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).reshape(-1))
        d_raw = np.asarray(self.d).reshape(-1)
        n = y.shape[0]
        if x.ndim != 2 or x.shape[0] != n or d_raw.shape[0] != n:
            raise DataError("x, y and d must agree on the number of rows")
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if x.shape[1] != self.schema.width:
            raise SchemaMismatchError(
                f"x has {x.shape[1]} columns but the schema expands to {self.schema.width}"
            )
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("covariates and outcome must be finite")
        if not np.isin(d_raw, (0, 1)).all():
            raise DataError("treatment must be coded 0/1")
        d = np.ascontiguousarray(d_raw.astype(np.int64))
        for name, cols in self.schema.column_groups().items():
            if self.schema.entries[self.schema.names.index(name)].kind == CATEGORICAL:
                if not np.array_equal(x[:, cols].sum(axis=1), np.ones(n)):
                    raise DataError(f"indicator columns of {name!r} do not sum to 1")
        prop = self.propensity
        if prop is None:
            prop = float(d.mean())
        elif np.ndim(prop) == 0:
            prop = float(prop)
        else:
            prop = np.asarray(prop, dtype=float).reshape(-1)
            if prop.shape[0] != n:
                raise DataError("per-row propensity must have one entry per row")
        if self.propensity is not None and not (np.all(prop > 0) and np.all(prop < 1)):
            raise DataError("propensity must lie strictly between 0 and 1")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        if ids.shape[0] != n:
            raise DataError("ids must have one entry per row")
        for name, val in (("x", x), ("y", y), ("d", d), ("propensity", prop), ("ids", ids)):
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.d.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def propensity_vector(self) -> np.ndarray:
        if np.ndim(self.propensity) == 0:
            return np.full(self.n, float(self.propensity))
        return np.asarray(self.propensity)

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; the propensity is carried over, not re-estimated."""
        idx = np.asarray(idx)
        prop = self.propensity if np.ndim(self.propensity) == 0 else self.propensity[idx]
        return Dataset(self.schema, self.x[idx], self.y[idx], self.d[idx], prop, self.ids[idx])

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.schema, self.x, y, self.d, self.propensity, self.ids)

    def raw_columns(self) -> dict[str, np.ndarray]:
        """Inverse of the categorical expansion: level labels / numeric values."""
        out = {}
        for e, cols in zip(self.schema.entries, self.schema.column_groups().values()):
            if e.kind == CATEGORICAL:
                out[e.name] = np.asarray(e.levels, dtype=object)[self.x[:, cols].argmax(axis=1)]
            else:
                out[e.name] = self.x[:, cols[0]]
        return out

    def to_csv(self, path: str | Path, outcome_col: str = "y", treatment_col: str = "d") -> None:
        write_csv(self, path, outcome_col, treatment_col)


def _fmt(v: float) -> str:
    # repr is the shortest round-tripping decimal form
    return repr(float(v))


def write_csv(data: Dataset, path: str | Path, outcome_col: str = "y", treatment_col: str = "d") -> None:
    raw = data.raw_columns()
    names = data.schema.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names, outcome_col, treatment_col])
        for i in range(data.n):
            row = [str(data.ids[i])]
            for e in data.schema.entries:
                v = raw[e.name][i]
                row.append(v if e.kind == CATEGORICAL else _fmt(v))
            row += [_fmt(data.y[i]), str(int(data.d[i]))]
            w.writerow(row)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def _read_table(path, schema, outcome_col, treatment_col, id_col, propensity_col):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        needed = schema.names + [c for c in (outcome_col, treatment_col, propensity_col) if c]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaMismatchError(f"{path}: missing column(s) {missing}")
        pos = {h: k for k, h in enumerate(header)}
        raw: dict[str, list] = {c: [] for c in schema.names}
        y, d, prop, ids = [], [], [], []
        kinds = {e.name: e for e in schema.entries}
        nrows = 0
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {r}: expected {len(header)} fields, got {len(row)}")
            nrows += 1
            for name in schema.names:
                cell = row[pos[name]].strip()
                if cell == "":
                    raise DataError(f"row {r}, column {name!r}: missing value")
                e = kinds[name]
                if e.kind == CATEGORICAL:
                    if cell not in e.levels:
                        raise DataError(f"row {r}, column {name!r}: unknown level {cell!r}")
                    raw[name].append(cell)
                else:
                    raw[name].append(_parse_float(cell, r, name))
            if outcome_col:
                y.append(_parse_float(row[pos[outcome_col]].strip(), r, outcome_col))
            if treatment_col:
                t = row[pos[treatment_col]].strip()
                if t not in ("0", "1"):
                    raise DataError(f"row {r}, column {treatment_col!r}: treatment must be 0 or 1, got {t!r}")
                d.append(int(t))
            if propensity_col:
                prop.append(_parse_float(row[pos[propensity_col]].strip(), r, propensity_col))
            if id_col and id_col in pos:
                ids.append(row[pos[id_col]].strip())
    if not nrows:
        raise DataError(f"{path}: no data rows")
    ids_arr = None
    if ids:
        ids_arr = np.asarray(ids, dtype=object)
        try:
            ints = np.asarray([int(v) for v in ids])
        except ValueError:
            pass
        else:
            if all(str(v) == s for v, s in zip(ints, ids)):
                ids_arr = ints
    return schema.expand(raw), y, d, prop, ids_arr


def load_csv(
    path: str | Path,
    schema: CovariateSchema,
    outcome_col: str = "y",
    treatment_col: str = "d",
    id_col: str | None = "id",
    propensity_col: str | None = None,
) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    Missing schema columns raise :class:`SchemaMismatchError`.
    """
    x, y, d, prop, ids = _read_table(path, schema, outcome_col, treatment_col, id_col, propensity_col)
    return Dataset(schema, x, np.asarray(y), np.asarray(d), np.asarray(prop) if prop else None, ids)


def load_covariates(path: str | Path, schema: CovariateSchema,
                    id_col: str | None = "id") -> tuple[np.ndarray, np.ndarray]:
    """Expanded covariate matrix and row ids (0..n-1 without an id column)."""
    x, _, _, _, ids = _read_table(path, schema, None, None, id_col, None)
    return x, (np.arange(x.shape[0]) if ids is None else ids)


class SeededSampler:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Distinct stream ids yield statistically independent generators
    (``numpy.random.SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int, stream: int | Sequence[int] = 0):
        if seed is None:
            raise ValueError("a seed is required")
        self.seed = int(seed)
        self.stream = tuple(stream) if isinstance(stream, (tuple, list)) else (int(stream),)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream)))

    def child(self, *key: int) -> "SeededSampler":
        return SeededSampler(self.seed, self.stream + tuple(int(k) for k in key))

    def uint64(self, size: int | None = None):
        return self.rng.integers(0, np.iinfo(np.uint64).max, size=size, dtype=np.uint64, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.rng.permutation(n)

    def __repr__(self):
        return f"SeededSampler(seed={self.seed}, stream={self.stream})"


def split_half_indices(n: int, sampler: SeededSampler) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise DataError("need at least 2 rows to split in half")
    perm = sampler.permutation(n)
    k = (n + 1) // 2
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_half(data: Dataset, sampler: SeededSampler) -> tuple[Dataset, Dataset]:
    """Random disjoint halves of sizes ceil(n/2) and floor(n/2)."""
    a, b = split_half_indices(data.n, sampler)
    return data.subset(a), data.subset(b)


def subsample(data: Dataset | int, fraction: float, sampler: SeededSampler) -> np.ndarray:
    """Sorted indices of floor(fraction * n) rows drawn without replacement."""
    n = data if isinstance(data, (int, np.integer)) else data.n
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    size = int(math.floor(fraction * n))
    if size < 2:
        raise DataError(f"fraction {fraction} of {n} rows leaves fewer than 2 rows")
    return np.sort(sampler.rng.choice(n, size=size, replace=False))
