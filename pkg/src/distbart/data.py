"""Grouped tabular data: loading, encoding and the pooled percentile transform.

Every downstream module works on samples in the unit cube. Continuous
columns are mapped to their pooled tie-averaged percentile; categorical
columns are one-hot encoded.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class DataLoadError(ValueError):
    """Raised for malformed input files; carries file, line and column."""

    def __init__(self, message: str, file=None, line=None, column=None):
        self.file = None if file is None else str(file)
        self.line = line
        self.column = column
        where = []
        if file is not None:
            where.append(str(file))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NoGroupsError(DataLoadError):
    pass


class UnknownGroupError(DataLoadError):
    pass


class DuplicateGroupError(DataLoadError):
    pass


class NonNumericError(DataLoadError):
    pass


class UnknownLevelError(DataLoadError):
    pass


class MissingValueError(DataLoadError):
    pass


class EmptyGroupError(DataLoadError):
    pass


class SchemaError(DataLoadError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = CONTINUOUS
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise SchemaError(f"unknown column kind {self.kind!r}", column=self.name)
        if self.kind == CATEGORICAL and not self.levels:
            raise SchemaError("categorical column needs at least one level", column=self.name)
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError("duplicate categorical level", column=self.name)


_SCHEMA_LINE = re.compile(r"^\s*([^=\s]+)\s*=\s*(continuous|categorical\((.*)\))\s*$")


def parse_schema(text: str, file=None) -> list[ColumnSpec]:
    """Parse ``name = continuous`` / ``name = categorical(a|b|c)`` lines."""
    specs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _SCHEMA_LINE.match(line)
        if m is None:
            raise SchemaError(f"cannot parse schema line {line!r}", file, lineno)
        name, kind, levels = m.group(1), m.group(2), m.group(3)
        if kind == CONTINUOUS:
            specs.append(ColumnSpec(name))
        else:
            specs.append(ColumnSpec(name, CATEGORICAL, tuple(lv.strip() for lv in levels.split("|"))))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column in schema", file)
    return specs


def read_schema(path) -> list[ColumnSpec]:
    path = Path(path)
    return parse_schema(path.read_text(encoding="utf-8"), file=path)


def format_schema(schema: Sequence[ColumnSpec]) -> str:
    lines = []
    for spec in schema:
        if spec.kind == CONTINUOUS:
            lines.append(f"{spec.name} = continuous")
        else:
            lines.append(f"{spec.name} = categorical({'|'.join(spec.levels)})")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GroupedSamples:
    """Stacked numeric samples with a row-to-group index."""

    X: np.ndarray
    group_index: np.ndarray
    n_groups: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.n_groups)

    def group(self, i: int) -> np.ndarray:
        return self.X[self.group_index == i]


@dataclass(frozen=True)
class RawDataset:
    """Groups of raw covariate rows with one outcome per group.

    Column values are stored column-wise: floats for continuous columns and
    level strings for categorical ones.
    """

    group_ids: tuple[str, ...]
    y: np.ndarray
    schema: tuple[ColumnSpec, ...]
    columns: Mapping[str, np.ndarray]
    group_index: np.ndarray

    def __post_init__(self):
        if len(self.group_ids) == 0:
            raise NoGroupsError("no groups")
        if len(set(self.group_ids)) != len(self.group_ids):
            raise DuplicateGroupError("group ids must be unique")
        sizes = np.bincount(self.group_index, minlength=self.n_groups)
        if sizes.shape[0] != self.n_groups or np.any(sizes < 1):
            missing = [g for g, s in zip(self.group_ids, sizes) if s < 1]
            raise EmptyGroupError(f"groups without samples: {missing[:5]}")
        for spec in self.schema:
            col = self.columns[spec.name]
            if col.shape[0] != self.group_index.shape[0]:
                raise SchemaError("column length mismatch", column=spec.name)
            if spec.kind == CONTINUOUS and not np.all(np.isfinite(col)):
                raise MissingValueError("non-finite continuous value", column=spec.name)
            if spec.kind == CATEGORICAL:
                bad = set(col.tolist()) - set(spec.levels)
                if bad:
                    raise UnknownLevelError(f"unseen level {sorted(bad)[0]!r}", column=spec.name)

    @property
    def n_groups(self) -> int:
        return len(self.group_ids)

    @property
    def n_covariates(self) -> int:
        return len(self.schema)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.n_groups)

    @property
    def covariate_names(self) -> list[str]:
        return [s.name for s in self.schema]

    def groups(self):
        """Yield ``(group_id, y, rows)`` with rows as a column mapping."""
        for i, gid in enumerate(self.group_ids):
            mask = self.group_index == i
            yield gid, float(self.y[i]), {k: v[mask] for k, v in self.columns.items()}

    def subset(self, indices) -> RawDataset:
        """Groups at ``indices`` (in that order), re-indexed from 0."""
        indices = np.asarray(indices, dtype=int)
        remap = np.full(self.n_groups, -1)
        remap[indices] = np.arange(indices.size)
        new_index = remap[self.group_index]
        keep = new_index >= 0
        order = np.argsort(new_index[keep], kind="stable")
        return RawDataset(
            group_ids=tuple(self.group_ids[i] for i in indices),
            y=self.y[indices].copy(),
            schema=self.schema,
            columns={k: v[keep][order] for k, v in self.columns.items()},
            group_index=new_index[keep][order],
        )

    def drop_covariates(self, names) -> RawDataset:
        names = set(names)
        return RawDataset(
            group_ids=self.group_ids,
            y=self.y,
            schema=tuple(s for s in self.schema if s.name not in names),
            columns={k: v for k, v in self.columns.items() if k not in names},
            group_index=self.group_index,
        )

    def with_outcomes(self, y) -> RawDataset:
        return RawDataset(self.group_ids, np.asarray(y, dtype=float), self.schema, self.columns, self.group_index)

    def numeric(self) -> GroupedSamples:
        """Raw continuous values plus one-hot categoricals, no percentile map."""
        cols = []
        for spec in self.schema:
            col = self.columns[spec.name]
            if spec.kind == CONTINUOUS:
                cols.append(col.astype(float)[:, None])
            else:
                cols.append(_one_hot(col, spec))
        X = np.hstack(cols) if cols else np.zeros((self.group_index.size, 0))
        return GroupedSamples(X, self.group_index, self.n_groups)


def _one_hot(values: np.ndarray, spec: ColumnSpec) -> np.ndarray:
    lookup = {lv: k for k, lv in enumerate(spec.levels)}
    out = np.zeros((values.shape[0], len(spec.levels)))
    try:
        idx = np.fromiter((lookup[v] for v in values), dtype=int, count=values.shape[0])
    except KeyError as exc:
        raise UnknownLevelError(f"unseen level {exc.args[0]!r}", column=spec.name) from None
    out[np.arange(values.shape[0]), idx] = 1.0
    return out


def _read_outcomes(outcomes_file: Path) -> dict[str, float]:
    outcomes: dict[str, float] = {}
    with outcomes_file.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise NoGroupsError("no groups", outcomes_file)
        if [h.strip() for h in header] != ["group_id", "y"]:
            raise DataLoadError("header must be 'group_id,y'", outcomes_file, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataLoadError("expected 2 fields", outcomes_file, lineno)
            gid, yval = row[0].strip(), row[1].strip()
            if gid in outcomes:
                raise DuplicateGroupError(f"duplicate group_id {gid!r}", outcomes_file, lineno, "group_id")
            if yval == "":
                raise MissingValueError("missing outcome", outcomes_file, lineno, "y")
            try:
                outcomes[gid] = float(yval)
            except ValueError:
                raise NonNumericError(f"non-numeric outcome {yval!r}", outcomes_file, lineno, "y") from None
            if not np.isfinite(outcomes[gid]):
                raise NonNumericError(f"non-finite outcome {yval!r}", outcomes_file, lineno, "y")
    if not outcomes:
        raise NoGroupsError("no groups", outcomes_file)
    return outcomes


def load_dataset(samples_file, outcomes_file=None, schema=None) -> RawDataset:
    """Read the samples and outcomes CSVs.

    ``schema`` is a list of :class:`ColumnSpec`, a path to a schema file, or
    ``None`` (every covariate continuous). Groups are ordered by first
    appearance in the samples file. Without an outcomes file every group is
    accepted and ``y`` is NaN, which suits prediction.
    """
    samples_file = Path(samples_file)
    outcomes: dict[str, float] | None = None
    if outcomes_file is not None:
        outcomes = _read_outcomes(Path(outcomes_file))

    with samples_file.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "group_id":
            raise DataLoadError("header must start with 'group_id'", samples_file, 1)
        names = [h.strip() for h in header[1:]]
        if isinstance(schema, (str, Path)):
            schema = read_schema(schema)
        if schema is None:
            schema = [ColumnSpec(n) for n in names]
        by_name = {s.name: s for s in schema}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise SchemaError(f"covariate {missing[0]!r} absent from schema", samples_file, 1, missing[0])
        extra = [s.name for s in schema if s.name not in names]
        if extra:
            raise SchemaError(f"schema column {extra[0]!r} absent from samples", samples_file, 1, extra[0])
        specs = [by_name[n] for n in names]

        order: dict[str, int] = {}
        gidx: list[int] = []
        raw_cols: list[list] = [[] for _ in names]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names) + 1:
                raise DataLoadError(f"expected {len(names) + 1} fields", samples_file, lineno)
            gid = row[0].strip()
            if outcomes is not None and gid not in outcomes:
                raise UnknownGroupError(f"group_id {gid!r} not in outcomes", samples_file, lineno, "group_id")
            if gid not in order:
                order[gid] = len(order)
            gidx.append(order[gid])
            for k, (spec, cell) in enumerate(zip(specs, row[1:])):
                cell = cell.strip()
                if cell == "":
                    raise MissingValueError("missing value", samples_file, lineno, spec.name)
                if spec.kind == CONTINUOUS:
                    try:
                        val = float(cell)
                    except ValueError:
                        raise NonNumericError(f"non-numeric value {cell!r}", samples_file, lineno, spec.name) from None
                    if not np.isfinite(val):
                        raise NonNumericError(f"non-finite value {cell!r}", samples_file, lineno, spec.name)
                    raw_cols[k].append(val)
                else:
                    if cell not in spec.levels:
                        raise UnknownLevelError(f"unseen level {cell!r}", samples_file, lineno, spec.name)
                    raw_cols[k].append(cell)

    empty = [g for g in outcomes if g not in order] if outcomes is not None else []
    if empty:
        raise EmptyGroupError(f"group {empty[0]!r} has no samples", samples_file)
    if not order:
        raise NoGroupsError("no groups", samples_file)
    group_ids = tuple(order)
    columns = {}
    for spec, vals in zip(specs, raw_cols):
        columns[spec.name] = np.asarray(vals, dtype=float if spec.kind == CONTINUOUS else object)
    return RawDataset(
        group_ids=group_ids,
        y=np.array([outcomes[g] for g in group_ids]) if outcomes is not None else np.full(len(group_ids), np.nan),
        schema=tuple(specs),
        columns=columns,
        group_index=np.asarray(gidx, dtype=np.intp),
    )


def write_dataset(raw: RawDataset, samples_file, outcomes_file) -> None:
    with Path(outcomes_file).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "y"])
        for gid, y in zip(raw.group_ids, raw.y):
            w.writerow([gid, repr(float(y))])
    with Path(samples_file).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", *raw.covariate_names])
        cols = [raw.columns[n] for n in raw.covariate_names]
        for r, g in enumerate(raw.group_index):
            cells = []
            for spec, col in zip(raw.schema, cols):
                cells.append(repr(float(col[r])) if spec.kind == CONTINUOUS else col[r])
            w.writerow([raw.group_ids[g], *cells])


@dataclass(frozen=True)
class ColumnBlock:
    """Output columns produced by one original covariate."""

    name: str
    kind: str
    columns: tuple[int, ...]
    levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class PercentileTransform:
    """Fitted pooled percentile map (continuous) and one-hot map (categorical).

    For a continuous column, ``knots[name]`` holds the sorted distinct pooled
    values and ``percentiles[name]`` their tie-averaged rank over the pooled
    count ``counts[name]``.
    """

    schema: tuple[ColumnSpec, ...]
    knots: Mapping[str, np.ndarray]
    percentiles: Mapping[str, np.ndarray]
    counts: Mapping[str, int]
    blocks: tuple[ColumnBlock, ...]
    column_names: tuple[str, ...]
    warnings: tuple[str, ...] = ()

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def to_dict(self) -> dict:
        return {
            "schema": [{"name": s.name, "kind": s.kind, "levels": list(s.levels)} for s in self.schema],
            "continuous": {
                name: {
                    "knots": self.knots[name].tolist(),
                    "percentiles": self.percentiles[name].tolist(),
                    "count": int(self.counts[name]),
                }
                for name in self.knots
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PercentileTransform:
        schema = tuple(ColumnSpec(s["name"], s["kind"], tuple(s["levels"])) for s in d["schema"])
        cont = d["continuous"]
        return _build_transform(
            schema,
            {k: np.asarray(v["knots"], dtype=float) for k, v in cont.items()},
            {k: np.asarray(v["percentiles"], dtype=float) for k, v in cont.items()},
            {k: int(v["count"]) for k, v in cont.items()},
            tuple(d.get("warnings", ())),
        )


def _build_transform(schema, knots, percentiles, counts, warnings) -> PercentileTransform:
    blocks, names = [], []
    for spec in schema:
        start = len(names)
        if spec.kind == CONTINUOUS:
            names.append(spec.name)
        else:
            names.extend(f"{spec.name}={lv}" for lv in spec.levels)
        blocks.append(ColumnBlock(spec.name, spec.kind, tuple(range(start, len(names))), spec.levels))
    return PercentileTransform(
        schema=tuple(schema),
        knots=knots,
        percentiles=percentiles,
        counts=counts,
        blocks=tuple(blocks),
        column_names=tuple(names),
        warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class TransformedDataset(GroupedSamples):
    """Groups with samples in the unit cube, ready for featurization."""

    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    group_ids: tuple[str, ...] = ()
    column_names: tuple[str, ...] = ()
    transform: PercentileTransform | None = None

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def fit_transform(raw: RawDataset) -> tuple[TransformedDataset, PercentileTransform]:
    """Fit the pooled percentile transform on ``raw`` and apply it."""
    knots, pcts, counts, warns = {}, {}, {}, []
    for spec in raw.schema:
        if spec.kind != CONTINUOUS:
            continue
        col = raw.columns[spec.name]
        n = col.shape[0]
        ranks = rankdata(col, method="average") / n
        uniq, first = np.unique(col, return_index=True)
        knots[spec.name] = uniq
        pcts[spec.name] = ranks[first]
        counts[spec.name] = n
        if uniq.size == 1:
            msg = f"column {spec.name!r} is constant"
            warns.append(msg)
            logger.warning(msg)
    transform = _build_transform(raw.schema, knots, pcts, counts, warns)
    X = apply_transform(transform, raw.columns)
    data = TransformedDataset(
        X=X,
        group_index=raw.group_index,
        n_groups=raw.n_groups,
        y=np.asarray(raw.y, dtype=float),
        group_ids=raw.group_ids,
        column_names=transform.column_names,
        transform=transform,
    )
    return data, transform


def apply_transform(transform: PercentileTransform, new_samples: Mapping[str, Sequence]) -> np.ndarray:
    """Map raw rows (column mapping) into the unit cube.

    Continuous values interpolate the fitted empirical CDF between knots and
    are clamped to ``[1/(n+1), 1]``.
    """
    out = []
    n_rows = None
    for spec in transform.schema:
        if spec.name not in new_samples:
            raise SchemaError("column missing from new samples", column=spec.name)
        col = np.asarray(new_samples[spec.name])
        if n_rows is None:
            n_rows = col.shape[0]
        elif col.shape[0] != n_rows:
            raise SchemaError("ragged columns", column=spec.name)
        if spec.kind == CONTINUOUS:
            col = col.astype(float)
            n = transform.counts[spec.name]
            floor = 1.0 / (n + 1)
            vals = np.interp(col, transform.knots[spec.name], transform.percentiles[spec.name], left=floor, right=1.0)
            out.append(np.clip(vals, floor, 1.0)[:, None])
        else:
            out.append(_one_hot(col, spec))
    if not out:
        return np.zeros((n_rows or 0, 0))
    return np.hstack(out)


def transform_dataset(transform: PercentileTransform, raw: RawDataset) -> TransformedDataset:
    """Apply an already-fitted transform to every group of ``raw``."""
    return TransformedDataset(
        X=apply_transform(transform, raw.columns),
        group_index=raw.group_index,
        n_groups=raw.n_groups,
        y=np.asarray(raw.y, dtype=float),
        group_ids=raw.group_ids,
        column_names=transform.column_names,
        transform=transform,
    )


def from_arrays(groups: Sequence[np.ndarray], y=None, group_ids=None, column_names=None) -> TransformedDataset:
    """Build a dataset directly from per-group arrays already in the unit cube."""
    groups = [np.atleast_2d(np.asarray(g, dtype=float)) for g in groups]
    if not groups:
        raise NoGroupsError("no groups")
    X = np.vstack(groups)
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("samples must lie in [0, 1]")
    index = np.repeat(np.arange(len(groups)), [g.shape[0] for g in groups])
    P = X.shape[1]
    return TransformedDataset(
        X=X,
        group_index=index,
        n_groups=len(groups),
        y=np.zeros(len(groups)) if y is None else np.asarray(y, dtype=float),
        group_ids=tuple(group_ids) if group_ids is not None else tuple(str(i) for i in range(len(groups))),
        column_names=tuple(column_names) if column_names is not None else tuple(f"x{p}" for p in range(P)),
    )
