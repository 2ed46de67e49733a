"""Mean and standard error across repetitions, rendered as markdown or LaTeX tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .algorithms import ALGORITHMS
from .records import RunRecord, group_cells
from .selection import Selection, get_criterion

AVG = "Avg"
FORMATS = ("markdown", "latex")


class ReportError(ValueError):
    pass


class MissingCellsError(ReportError):
    def __init__(self, missing: Sequence[tuple]):
        self.missing = list(missing)
        lines = "\n".join(f"  algorithm={a} dataset={d} test_env={t} rep={r}" for a, d, t, r in self.missing)
        super().__init__(f"{len(self.missing)} cells have no usable selection:\n{lines}")


@dataclass(frozen=True)
class AggregateCell:
    algorithm: str
    dataset: str
    domain: str
    criterion: str
    mean: float
    stderr: float
    n_reps: int
    column: int  # test-domain index, or -1 for the dataset average


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and ``std(ddof=1) / sqrt(n)``; the error is 0 for a single value."""
    n = len(values)
    if n == 0:
        raise ReportError("no values to aggregate")
    # sorted so the result does not depend on repetition order
    values = sorted(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def select_all(records: Iterable[RunRecord], criterion: str) -> dict[tuple, Selection]:
    """Apply ``criterion`` to every (algorithm, dataset, test_env, repetition) group."""
    select = get_criterion(criterion)
    return {k: select(v) for k, v in sorted(group_cells(records).items())}


def _algorithm_order(name: str):
    order = list(ALGORITHMS)
    return (order.index(name), "") if name in order else (len(order), name)


def aggregate(records: Iterable[RunRecord], criterion: str, allow_missing: bool = False) -> list[AggregateCell]:
    """Per-domain and per-dataset cells for every algorithm.

    The expected grid for a dataset is every test domain and repetition
    seen for any algorithm on it. Gaps raise :class:`MissingCellsError`
    unless ``allow_missing``, in which case incomplete repetitions are left
    out of the dataset average.
    """
    groups = group_cells(records)
    select = get_criterion(criterion)
    crit_name = select.__name__.removeprefix("select_")

    accs: dict[tuple, float] = {}
    missing = []
    names: dict[tuple, str] = {}
    for key, recs in groups.items():
        try:
            accs[key] = select(recs).test_acc
        except ValueError:
            missing.append(key)
        names[(key[1], key[2])] = recs[0].test_domain

    grid: dict[str, tuple[set, set]] = {}
    algs_by_ds: dict[str, set] = {}
    for alg, ds, t, rep in groups:
        envs, reps = grid.setdefault(ds, (set(), set()))
        envs.add(t)
        reps.add(rep)
        algs_by_ds.setdefault(ds, set()).add(alg)
    for ds, (envs, reps) in grid.items():
        for alg in algs_by_ds[ds]:
            for t in envs:
                for rep in reps:
                    if (alg, ds, t, rep) not in groups:
                        missing.append((alg, ds, t, rep))
    missing.sort()
    if missing and not allow_missing:
        raise MissingCellsError(missing)

    cells = []
    for ds in sorted(grid):
        envs, reps = grid[ds]
        for alg in sorted(algs_by_ds[ds], key=_algorithm_order):
            for t in sorted(envs):
                vals = [accs[(alg, ds, t, r)] for r in sorted(reps) if (alg, ds, t, r) in accs]
                if vals:
                    m, s = mean_stderr(vals)
                    cells.append(AggregateCell(alg, ds, names[(ds, t)], crit_name, m, s, len(vals), t))
            per_rep = []
            for r in sorted(reps):
                row = [accs.get((alg, ds, t, r)) for t in sorted(envs)]
                if all(v is not None for v in row):
                    per_rep.append(math.fsum(row) / len(row))
            if per_rep:
                m, s = mean_stderr(per_rep)
                cells.append(AggregateCell(alg, ds, AVG, crit_name, m, s, len(per_rep), -1))
    return cells


def format_percent(value: float, decimals: int = 1) -> str:
    """``value`` as a percentage, rounded half away from zero."""
    q = Decimal(1).scaleb(-decimals)
    return str((Decimal(repr(value)) * 100).quantize(q, rounding=ROUND_HALF_UP))


def format_cell(cell: AggregateCell, fmt: str = "markdown", decimals: int = 1) -> str:
    pm = " $\\pm$ " if fmt == "latex" else " ± "
    return format_percent(cell.mean, decimals) + pm + format_percent(cell.stderr, decimals)


def _latex_escape(s: str) -> str:
    for ch in "\\&%$#_{}":
        s = s.replace(ch, "\\" + ch)
    return s


def _grid(cells: Sequence[AggregateCell], decimals: int, fmt: str) -> tuple[list[str], list[tuple[str, list[str]]]]:
    datasets = sorted({c.dataset for c in cells})
    if len(datasets) == 1:
        chosen = list(cells)
        col_key = lambda c: (c.column == -1, c.column)  # noqa: E731
        label = lambda c: c.domain  # noqa: E731
    else:
        chosen = [c for c in cells if c.column == -1]
        col_key = lambda c: (0, datasets.index(c.dataset))  # noqa: E731
        label = lambda c: c.dataset  # noqa: E731

    rows: dict[str, dict] = {}
    headers: dict = {}
    for c in chosen:
        k = col_key(c)
        headers[k] = label(c)
        row = rows.setdefault(c.algorithm, {})
        if k in row:
            raise ReportError(f"duplicate cell for {c.algorithm} / {label(c)}")
        row[k] = c
    cols = sorted(headers)
    for alg, row in rows.items():
        if sorted(row) != cols:
            missing = [headers[k] for k in cols if k not in row]
            raise ReportError(f"ragged table: row {alg} lacks columns {missing}")

    out_rows = []
    for alg in sorted(rows, key=_algorithm_order):
        row = rows[alg]
        rendered = [format_cell(row[k], fmt, decimals) for k in cols]
        if len(datasets) > 1:
            rendered.append(format_percent(math.fsum(row[k].mean for k in cols) / len(cols), decimals))
        out_rows.append((alg, rendered))
    header = [headers[k] for k in cols] + ([AVG] if len(datasets) > 1 else [])
    return header, out_rows


def emit_table(cells: Sequence[AggregateCell], format: str = "markdown", percent_decimals: int = 1) -> str:
    """Rows are algorithms in registry order.

    For a single dataset the columns are its test domains followed by the
    average; across several datasets they are the per-dataset averages
    followed by their plain mean.
    """
    if format not in FORMATS:
        raise ReportError(f"unknown format {format!r}; expected one of {', '.join(FORMATS)}")
    if not cells:
        raise ReportError("no cells to render")
    header, rows = _grid(cells, percent_decimals, format)
    if format == "markdown":
        lines = ["| Algorithm | " + " | ".join(header) + " |", "|" + "---|" * (len(header) + 1)]
        lines += [f"| {alg} | " + " | ".join(vals) + " |" for alg, vals in rows]
    else:
        lines = [
            "\\begin{tabular}{l" + "c" * len(header) + "}",
            "\\toprule",
            "\\textbf{Algorithm} & " + " & ".join(f"\\textbf{{{_latex_escape(h)}}}" for h in header) + " \\\\",
            "\\midrule",
        ]
        lines += [f"{_latex_escape(alg)} & " + " & ".join(vals) + " \\\\" for alg, vals in rows]
        lines += ["\\bottomrule", "\\end{tabular}"]
    return "\n".join(lines) + "\n"
