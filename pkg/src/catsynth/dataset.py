"""Categorical microdata: codebooks, coded datasets and cross-tabulations.

Cells are stored as 1-based level indices in codebook order. A value of 0
marks a missing cell; such datasets are only produced by :func:`load_csv`
and must pass through :func:`drop_incomplete` before modelling.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = 0


class DataValidationError(ValueError):
    """Raised when input data or a codebook violates its contract."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    levels: tuple[str, ...]
    sensitive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))
        if len(self.levels) < 2:
            raise DataValidationError(
                f"variable '{self.name}' needs at least 2 levels, got {len(self.levels)}")
        if len(set(self.levels)) != len(self.levels):
            raise DataValidationError(f"variable '{self.name}' has duplicate level labels")

    @property
    def d(self) -> int:
        """Number of categories."""
        return len(self.levels)

    def code(self, label: str) -> int:
        try:
            return self.levels.index(label) + 1
        except ValueError:
            raise DataValidationError(
                f"unknown level '{label}' for variable '{self.name}'") from None


@dataclass(frozen=True)
class Codebook:
    variables: tuple[VariableSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if not names:
            raise DataValidationError("codebook has no variables")
        dup = {x for x in names if names.count(x) > 1}
        if dup:
            raise DataValidationError(f"duplicate variable names: {sorted(dup)}")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def r(self) -> int:
        return len(self.variables)

    @property
    def arities(self) -> list[int]:
        return [v.d for v in self.variables]

    @property
    def sensitive_names(self) -> list[str]:
        return [v.name for v in self.variables if v.sensitive]

    @property
    def nonsensitive_names(self) -> list[str]:
        return [v.name for v in self.variables if not v.sensitive]

    def index(self, name: str) -> int:
        for j, v in enumerate(self.variables):
            if v.name == name:
                return j
        raise DataValidationError(f"unknown variable '{name}'")

    def indices(self, names: Iterable[str]) -> list[int]:
        return [self.index(nm) for nm in names]

    def __getitem__(self, name: str) -> VariableSpec:
        return self.variables[self.index(name)]

    def to_dict(self) -> dict:
        return {"variables": [
            {"name": v.name, "levels": list(v.levels), "sensitive": v.sensitive}
            for v in self.variables]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Codebook":
        try:
            items = doc["variables"]
            return cls(tuple(
                VariableSpec(str(it["name"]), tuple(it["levels"]), bool(it.get("sensitive", False)))
                for it in items))
        except (KeyError, TypeError) as exc:
            raise DataValidationError(f"malformed codebook document: {exc}") from None


class CategoricalDataset:
    """Immutable n x r table of 1-based level codes with per-row identifiers.

    Parameters
    ----------
    codebook : Codebook
    values : array_like of shape (n, r)
        Level codes in ``[1, d_j]``; 0 marks a missing cell.
    record_ids : sequence of str, optional
        Unique row identifiers. Defaults to ``"1" ... "n"``.
    """

    def __init__(self, codebook: Codebook, values, record_ids: Sequence[str] | None = None):
        vals = np.array(values, dtype=np.int64, copy=True)
        if vals.ndim != 2 or vals.shape[1] != codebook.r:
            raise DataValidationError(
                f"values must have shape (n, {codebook.r}), got {vals.shape}")
        if vals.shape[0] < 1:
            raise DataValidationError("dataset is empty")
        upper = np.array(codebook.arities)
        bad = (vals < 0) | (vals > upper)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataValidationError(
                f"code {vals[i, j]} out of range for variable '{codebook.names[j]}' at row {i + 1}")
        if record_ids is None:
            ids = np.array([str(i + 1) for i in range(vals.shape[0])], dtype=object)
        else:
            ids = np.array([str(x) for x in record_ids], dtype=object)
            if ids.shape != (vals.shape[0],):
                raise DataValidationError("record_ids length does not match row count")
            if len(set(ids.tolist())) != ids.size:
                raise DataValidationError("record_ids are not unique")
        vals.flags.writeable = False
        ids.flags.writeable = False
        self._codebook = codebook
        self._values = vals
        self._ids = ids

    @property
    def codebook(self) -> Codebook:
        return self._codebook

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def record_ids(self) -> np.ndarray:
        return self._ids

    @property
    def n(self) -> int:
        return self._values.shape[0]

    @property
    def r(self) -> int:
        return self._values.shape[1]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"CategoricalDataset(n={self.n}, r={self.r})"

    def __eq__(self, other):
        if not isinstance(other, CategoricalDataset):
            return NotImplemented
        return (self._codebook == other._codebook
                and np.array_equal(self._values, other._values)
                and np.array_equal(self._ids, other._ids))

    def column(self, name: str) -> np.ndarray:
        return self._values[:, self._codebook.index(name)]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return self._values[:, self._codebook.indices(names)]

    @property
    def missing_mask(self) -> np.ndarray:
        return self._values == MISSING

    @property
    def has_missing(self) -> bool:
        return bool(self.missing_mask.any())

    def take(self, rows) -> "CategoricalDataset":
        rows = np.asarray(rows)
        return CategoricalDataset(self._codebook, self._values[rows], self._ids[rows].tolist())

    def replace_columns(self, updates: Mapping[str, np.ndarray]) -> "CategoricalDataset":
        """Return a copy with the named columns replaced; ids are kept."""
        vals = self._values.copy()
        for name, col in updates.items():
            vals[:, self._codebook.index(name)] = col
        return CategoricalDataset(self._codebook, vals, self._ids.tolist())

    def decode(self) -> list[list[str | None]]:
        out = []
        for row in self._values:
            out.append([None if c == MISSING else spec.levels[c - 1]
                        for c, spec in zip(row, self._codebook.variables)])
        return out

    def to_csv(self, path, id_column: str | None = "record_id", delimiter: str = ",",
               header_comments: Sequence[str] = ()) -> None:
        write_csv(self, path, id_column=id_column, delimiter=delimiter,
                  header_comments=header_comments)


def encode(rows: Iterable[Sequence[str | None]], codebook: Codebook,
           record_ids: Sequence[str] | None = None) -> CategoricalDataset:
    """Map label rows (in codebook column order) to a coded dataset; ``None`` is missing."""
    coded = []
    for i, row in enumerate(rows):
        if len(row) != codebook.r:
            raise DataValidationError(f"row {i + 1} has {len(row)} fields, expected {codebook.r}")
        out = []
        for label, spec in zip(row, codebook.variables):
            if label is None:
                out.append(MISSING)
                continue
            try:
                out.append(spec.code(label))
            except DataValidationError:
                raise DataValidationError(
                    f"unknown level '{label}' for variable '{spec.name}' at row {i + 1}") from None
        coded.append(out)
    if not coded:
        raise DataValidationError("no rows to encode")
    return CategoricalDataset(codebook, np.array(coded, dtype=np.int64), record_ids)


def load_csv(path, codebook: Codebook, missing_tokens: Iterable[str] = ("",),
             delimiter: str = ",", id_column: str | None = None,
             comment: str | None = "#") -> CategoricalDataset:
    """Read a delimited file with a header row into a coded dataset.

    Columns not named in the codebook are ignored. Cells equal to one of
    ``missing_tokens`` are marked missing (see :func:`drop_incomplete`).
    Leading lines starting with ``comment`` are skipped.
    """
    missing = set(missing_tokens)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if comment:
        while lines and lines[0].startswith(comment):
            lines.pop(0)
    reader = csv.reader(lines, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DataValidationError(f"{path}: file has no header row") from None
    absent = [nm for nm in codebook.names if nm not in header]
    if absent:
        raise DataValidationError(f"{path}: header is missing codebook variables {absent}")
    if id_column is not None and id_column not in header:
        raise DataValidationError(f"{path}: id column '{id_column}' not in header")
    pos = [header.index(nm) for nm in codebook.names]
    id_pos = header.index(id_column) if id_column is not None else None

    coded, ids = [], []
    for lineno, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataValidationError(
                f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        out = []
        for p, spec in zip(pos, codebook.variables):
            cell = row[p]
            if cell in missing:
                out.append(MISSING)
                continue
            try:
                out.append(spec.code(cell))
            except DataValidationError:
                raise DataValidationError(
                    f"{path}: unknown level '{cell}' for variable '{spec.name}' at row {lineno}"
                ) from None
        coded.append(out)
        ids.append(row[id_pos] if id_pos is not None else str(lineno))
    if not coded:
        raise DataValidationError(f"{path}: no data rows")
    return CategoricalDataset(codebook, np.array(coded, dtype=np.int64), ids)


def write_csv(dataset: CategoricalDataset, path, id_column: str | None = "record_id",
              delimiter: str = ",", header_comments: Sequence[str] = ()) -> None:
    """Write level labels with a header row. Output bytes depend only on the inputs."""
    with open(path, "w", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        names = dataset.codebook.names
        w.writerow(([id_column] if id_column else []) + names)
        for rid, row in zip(dataset.record_ids, dataset.decode()):
            cells = ["" if c is None else c for c in row]
            w.writerow(([rid] if id_column else []) + cells)


def drop_incomplete(dataset: CategoricalDataset) -> CategoricalDataset:
    """Listwise deletion: keep rows with no missing cell, in original order."""
    keep = ~dataset.missing_mask.any(axis=1)
    if keep.all():
        return dataset
    if not keep.any():
        raise DataValidationError("every row has a missing cell; dataset would be empty")
    return dataset.take(np.flatnonzero(keep))


@dataclass(frozen=True)
class FrequencyTable:
    """Relative frequencies of a t-way cross-tabulation.

    ``counts`` is a dense array with one axis per tabulated variable; axis
    position ``v`` corresponds to level code ``v + 1``. Zero cells are kept.
    """

    variables: tuple[str, ...]
    counts: np.ndarray
    n: int
    level_labels: tuple[tuple[str, ...], ...] = field(default=(), repr=False)

    @property
    def order(self) -> int:
        return len(self.variables)

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n

    @property
    def cells(self) -> dict[tuple[int, ...], float]:
        freq = self.frequencies
        return {tuple(int(i) + 1 for i in idx): float(freq[idx])
                for idx in np.ndindex(*freq.shape)}


def cross_tabulate(dataset: CategoricalDataset, variables: Sequence[str],
                   order: int | None = None) -> FrequencyTable:
    """Tabulate relative frequencies over ``variables`` (a t-way table, t = len(variables))."""
    variables = tuple(variables)
    t = len(variables)
    if order is not None and order != t:
        raise ValueError(f"order {order} does not match {t} variables")
    if not 1 <= t <= dataset.r:
        raise ValueError(f"table order must be in [1, {dataset.r}], got {t}")
    if len(set(variables)) != t:
        raise ValueError("tabulated variables must be distinct")
    idx = dataset.codebook.indices(variables)
    if dataset.has_missing:
        raise DataValidationError("cross_tabulate requires a complete dataset")
    shape = tuple(dataset.codebook.arities[j] for j in idx)
    flat = np.ravel_multi_index(tuple(dataset.values[:, j] - 1 for j in idx), shape)
    counts = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)
    labels = tuple(dataset.codebook.variables[j].levels for j in idx)
    return FrequencyTable(variables, counts, dataset.n, labels)


def table_subsets(codebook: Codebook, order: int, touching: Iterable[str] | None = None
                  ) -> list[tuple[str, ...]]:
    """All ``order``-subsets of variables, optionally only those touching ``touching``."""
    subsets = list(itertools.combinations(codebook.names, order))
    if touching is None:
        return subsets
    touch = set(touching)
    return [s for s in subsets if touch.intersection(s)]


def key_codes(dataset: CategoricalDataset, names: Sequence[str]) -> np.ndarray:
    """Encode the combination of ``names`` in each row as one integer."""
    idx = dataset.codebook.indices(names)
    if not idx:
        return np.zeros(dataset.n, dtype=np.int64)
    shape = tuple(dataset.codebook.arities[j] for j in idx)
    return np.ravel_multi_index(tuple(dataset.values[:, j] - 1 for j in idx), shape).astype(np.int64)


def yrbs_codebook() -> Codebook:
    """Demo codebook with the 13 variables of the 2019 NYC/Chicago YRBS extract."""
    yes_no = ("Yes", "No")
    return Codebook((
        VariableSpec("city", ("New York City", "Chicago")),
        VariableSpec("age", ("12", "13", "14", "15", "16", "17", "18")),
        VariableSpec("sex", ("Female", "Male")),
        VariableSpec("grade", ("9", "10", "11", "12")),
        VariableSpec("race", ("American Indian/Alaska Native", "Asian", "Black",
                              "Native Hawaiian/Pacific Islander", "White", "Hispanic/Latino",
                              "Multiple")),
        VariableSpec("obesity", yes_no, sensitive=True),
        VariableSpec("sexuality", ("Heterosexual", "Gay or lesbian", "Bisexual", "Not sure"),
                     sensitive=True),
        VariableSpec("sexual_violence", yes_no, sensitive=True),
        VariableSpec("tobacco", yes_no, sensitive=True),
        VariableSpec("alcohol", yes_no, sensitive=True),
        VariableSpec("marijuana", yes_no, sensitive=True),
        VariableSpec("drug", yes_no, sensitive=True),
        VariableSpec("sexual_contact", yes_no, sensitive=True),
    ))
