"""Ingestion of incomplete data matrices and monotone (staircase) ordering.

A :class:`DataMatrix` keeps the data in its original row/column order; a
:class:`MonotoneLayout` records the permutations that arrange it into a
staircase with non-increasing per-column counts, plus the latent "gap"
cells that must be imputed for the staircase to hold exactly.

Column positions in a layout are 0-based: position 0 is the most complete
column, and the regression for position ``j`` uses the ``j`` columns before
it as predictors.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

VALUE = 0
MISSING = 1
GAP = 2

_NA_ALIASES = ("NaN", "nan", "")


@dataclass
class DataMatrix:
    """An ``n x m`` matrix whose cells are values, missing, or latent gaps.

    ``values`` holds NaN wherever there is no value; latent gaps carry their
    current imputed value once the engine has filled them in.
    """

    values: np.ndarray
    state: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.state = np.asarray(self.state, dtype=np.int8)
        if self.values.ndim != 2 or self.values.shape != self.state.shape:
            raise DataError("values and state must be matching 2-d arrays")
        if not self.labels:
            self.labels = [f"V{j + 1}" for j in range(self.values.shape[1])]
        if len(self.labels) != self.values.shape[1]:
            raise DataError("one label per column required")

    @classmethod
    def from_array(cls, arr, labels=None) -> "DataMatrix":
        """Wrap a float array, treating NaN entries as missing."""
        arr = np.array(arr, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        state = np.where(np.isnan(arr), MISSING, VALUE).astype(np.int8)
        return cls(arr, state, list(labels) if labels is not None else [])

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "DataMatrix":
        return DataMatrix(self.values.copy(), self.state.copy(), list(self.labels))

    def missing_counts(self) -> np.ndarray:
        """Per-column count of cells outside the support (Missing only)."""
        return (self.state == MISSING).sum(axis=0)

    def has_gaps(self) -> bool:
        return bool((self.state == GAP).any())


@dataclass(frozen=True)
class MonotoneLayout:
    """Permutations and counts describing the staircase arrangement.

    Attributes
    ----------
    col_order, row_order : ndarray of int
        ``ordered = original[row_order][:, col_order]``.
    n_obs : ndarray of int
        ``n_j`` for each ordered column: observed plus latent-gap cells.
    gaps : tuple of ndarray
        For each ordered column, the ordered-row positions (all ``< n_j``)
        of its latent-gap cells.
    """

    col_order: np.ndarray
    row_order: np.ndarray
    n_obs: np.ndarray
    gaps: tuple

    def ordered(self, a: np.ndarray) -> np.ndarray:
        """Permute an ``n x m`` array of the original data into layout order."""
        return np.asarray(a)[self.row_order][:, self.col_order]

    @property
    def n_gaps(self) -> int:
        return int(sum(len(g) for g in self.gaps))


def load_matrix(source, missing_token: str = "NA", delimiter: str | None = None,
                header: bool | None = None) -> DataMatrix:
    """Parse a delimited text table into a :class:`DataMatrix`.

    Parameters
    ----------
    source : str, path-like or file object
        Text stream, path, or the table contents themselves (a string that
        contains a newline is treated as contents).
    missing_token : str
        Cell text marking a missing entry. ``"NaN"`` and empty cells are
        always read as missing too.
    delimiter : str, optional
        Auto-detected from the first line (tab, comma, semicolon) if omitted.
    header : bool, optional
        Whether the first row holds column labels. When omitted, the first
        row is a header iff any of its cells fails to parse as a number.

    Raises
    ------
    DataError
        On ragged rows, unparseable cells, or a column without observed values.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty input")
    if delimiter is None:
        first = lines[0]
        delimiter = next((d for d in ("\t", ",", ";") if d in first), ",")
    rows = [[c.strip() for c in r] for r in csv.reader(io.StringIO("\n".join(lines)),
                                                        delimiter=delimiter)]
    na = {missing_token, *_NA_ALIASES}

    def _num(c):
        if c in na:
            return np.nan
        return float(c)

    if header is None:
        header = False
        for c in rows[0]:
            if c in na:
                continue
            try:
                float(c)
            except ValueError:
                header = True
                break
    labels = rows[0] if header else []
    body = rows[1:] if header else rows
    if not body:
        raise DataError("no data rows")
    width = len(labels) if header else len(body[0])
    vals = np.empty((len(body), width))
    for i, r in enumerate(body):
        if len(r) != width:
            raise DataError(f"ragged row {i + 1}: {len(r)} cells, expected {width}")
        for j, c in enumerate(r):
            try:
                vals[i, j] = _num(c)
            except ValueError:
                raise DataError(f"unparseable cell {c!r} at row {i + 1}, column {j + 1}") from None
    d = DataMatrix.from_array(vals, labels or None)
    counts = (d.state == VALUE).sum(axis=0)
    for j in np.flatnonzero(counts < 1):
        raise DataError(f"column {j + 1} ({d.labels[j]!r}) has no observed values")
    return d


def _row_sort(state_ordered: np.ndarray, prior_order: np.ndarray) -> np.ndarray:
    miss = (state_ordered == MISSING).sum(axis=1)
    return prior_order[np.argsort(miss, kind="stable")]


def _gap_positions(state_ordered: np.ndarray) -> np.ndarray:
    """Boolean mask of MISSING cells that have support further right."""
    support = state_ordered != MISSING
    # cumulative "any support at or right of column j"
    right = np.flip(np.logical_or.accumulate(np.flip(support, axis=1), axis=1), axis=1)
    later = np.zeros_like(right)
    later[:, :-1] = right[:, 1:]
    return (state_ordered == MISSING) & later


def _build_layout(d: DataMatrix, col_order, row_order) -> MonotoneLayout:
    st = d.state[row_order][:, col_order]
    support = st != MISSING
    n_obs = support.sum(axis=0)
    gaps = tuple(np.flatnonzero(st[:, j] == GAP) for j in range(d.m))
    return MonotoneLayout(np.asarray(col_order), np.asarray(row_order), n_obs, gaps)


def order_monotone(d: DataMatrix) -> MonotoneLayout:
    """Sort columns, then rows, by ascending missing count (stable)."""
    col_order = np.argsort(d.missing_counts(), kind="stable")
    row_order = _row_sort(d.state[:, col_order], np.arange(d.n))
    return _build_layout(d, col_order, row_order)


def check_monotone(layout: MonotoneLayout, d: DataMatrix) -> list[tuple[int, int]]:
    """Cells breaking the staircase, as sorted ``(row, col)`` original indices.

    A cell violates monotonicity when it is missing but some later column
    (in layout order) of the same row is observed. Latent gaps count as
    observed, so after :func:`mark_gaps` the list is empty.
    """
    st = layout.ordered(d.state)
    bad = np.argwhere(_gap_positions(st))
    return sorted((int(layout.row_order[i]), int(layout.col_order[j])) for i, j in bad)


def mark_gaps(d: DataMatrix, layout: MonotoneLayout) -> tuple[DataMatrix, MonotoneLayout]:
    """Convert every non-monotone missing cell into a latent gap.

    Rows are re-sorted by the number of cells still missing, preserving the
    current row order among ties. Gap cells hold NaN until imputed.
    """
    st = layout.ordered(d.state)
    mask = _gap_positions(st)
    out = d.copy()
    if mask.any():
        rows, cols = np.nonzero(mask)
        oi, oj = layout.row_order[rows], layout.col_order[cols]
        out.state[oi, oj] = GAP
        out.values[oi, oj] = np.nan
    row_order = _row_sort(out.state[layout.row_order][:, layout.col_order], layout.row_order)
    return out, _build_layout(out, layout.col_order, row_order)


def design_for_column(j: int, d: DataMatrix, layout: MonotoneLayout,
                      include_intercept: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix and response for the regression of ordered column ``j``.

    Returns ``(Y_j, y_j)`` with ``Y_j`` the first ``n_j`` ordered rows of the
    ``j`` preceding columns (optionally prefixed by a column of ones) and
    ``y_j`` the first ``n_j`` rows of column ``j``. Gap cells of ``y_j`` may be
    NaN; gap cells in the design must already be imputed.
    """
    if not 0 <= j < d.m:
        raise IndexError(f"column position {j} out of range for m={d.m}")
    nj = int(layout.n_obs[j])
    vals = layout.ordered(d.values)[:nj]
    st = layout.ordered(d.state)[:nj]
    X = vals[:, :j]
    bad = np.argwhere(np.isnan(X) & (st[:, :j] == GAP))
    if len(bad):
        i, k = bad[0]
        raise DataError(f"latent gap at row {layout.row_order[i]}, column "
                        f"{d.labels[layout.col_order[k]]!r} has not been imputed")
    if np.isnan(X).any():
        raise DataError("design contains missing cells; layout does not match data")
    if include_intercept:
        X = np.column_stack([np.ones(nj), X])
    return X, vals[:, j].copy()
