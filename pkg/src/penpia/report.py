"""Result records for iteration ladders, plus serialization helpers.

Every solver front end (Monte Carlo, grid, controlled volatility) reports
its ladder through the same small vocabulary: one :class:`IterationRecord`
per iterate, an optional :class:`ReferenceValue` stating what the ladder is
being compared against and where that number came from, optional
:class:`CrosscheckResult` entries from independent re-evaluations, and a
:class:`ConvergenceReport` bundling them together with the fitted decay
rate.  Keeping these types free of solver imports lets the grid and
Monte Carlo drivers share them without depending on each other.

Serialization is deliberately boring: a flat CSV with one row per iterate
(floats written in shortest round-trip form, missing entries as empty
cells) and a JSON envelope carrying the full report including the
configuration it was produced from.  Both writers are atomic -- they write
to a temporary file in the target directory and rename it into place -- so
a crashed run never leaves a truncated report behind.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, ValidationError

__all__ = [
    "CSV_COLUMNS",
    "PROVENANCES",
    "ReferenceValue",
    "IterationRecord",
    "CrosscheckResult",
    "ConvergenceReport",
    "fit_rate",
    "runtime_versions",
    "format_cell",
    "records_to_csv",
    "converge_runs_to_csv",
    "report_to_dict",
    "report_to_json",
    "atomic_write_text",
    "write_report",
]

logger = logging.getLogger(__name__)

#: Column order of the per-iterate CSV, one row per record.
CSV_COLUMNS = (
    "n",
    "phi_n",
    "value",
    "stderr",
    "err",
    "z_distance",
    "control_distance",
    "wall_ms",
)

#: Admissible origins for a reference value.  Mixing origins inside one
#: report is forbidden; a report states exactly one provenance.
PROVENANCES = ("analytic", "pde-oracle", "bsde-oracle", "none")


def _require_finite(name: str, value: float | None) -> float | None:
    if value is None:
        return None
    out = float(value)
    if not math.isfinite(out):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return out


@dataclass(frozen=True)
class ReferenceValue:
    """A comparison target for a ladder, together with its origin.

    ``provenance`` names how the number was obtained: a closed form
    ("analytic"), a dense grid solve ("pde-oracle"), a regression-based
    backward solve ("bsde-oracle"), or "none" when no target exists (in
    which case ``value`` must be ``None`` and error columns stay empty).
    ``tolerance`` is the reference's own accuracy estimate when one is
    available, e.g. the observed change under one grid refinement.
    """

    value: float | None
    provenance: str
    tolerance: float | None = None

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValidationError(
                f"unknown provenance {self.provenance!r}; expected one of "
                f"{', '.join(PROVENANCES)}"
            )
        if (self.value is None) != (self.provenance == "none"):
            raise ValidationError(
                "reference value and provenance disagree: value is required "
                "exactly when provenance is not 'none'"
            )
        object.__setattr__(self, "value", _require_finite("reference value", self.value))
        object.__setattr__(
            self, "tolerance", _require_finite("reference tolerance", self.tolerance)
        )


@dataclass(frozen=True)
class IterationRecord:
    """One ladder rung: the iterate's value and its movement diagnostics.

    ``stderr`` is the Monte Carlo standard error (``None`` for grid runs),
    ``err`` the gap to the reference (``None`` without one): Monte Carlo
    ladders record the signed difference of scalar values, grid ladders the
    sup-norm of the field gap over the central comparison window.
    ``z_distance`` estimates the integrated squared change of the feedback
    field between this iterate and the previous one, ``control_distance``
    the same for the induced actions; both measure how far the policy still
    moves.  ``wall_ms`` is the iterate's wall-clock cost in milliseconds,
    recorded as 0.0 when timing capture is disabled so that repeated runs
    serialize identically.
    """

    n: int
    phi_n: float
    value: float
    stderr: float | None = None
    err: float | None = None
    z_distance: float | None = None
    control_distance: float | None = None
    wall_ms: float = 0.0

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 0:
            raise ValidationError(f"iteration index must be a non-negative integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        phi = _require_finite("phi_n", self.phi_n)
        if phi is None or phi < 1.0:
            raise ValidationError(f"phi_n must be >= 1, got {self.phi_n!r}")
        object.__setattr__(self, "phi_n", phi)
        object.__setattr__(self, "value", _require_finite("value", float(self.value)))
        for name in ("stderr", "err", "z_distance", "control_distance"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))
        object.__setattr__(self, "wall_ms", _require_finite("wall_ms", float(self.wall_ms)))


@dataclass(frozen=True)
class CrosscheckResult:
    """Outcome of re-evaluating one iterate by an independent route.

    ``v_tilde`` is the re-evaluated value (e.g. from a fresh drifted
    simulation without reweighting), ``v_n`` the ladder's own value, and
    ``gap`` their difference.  ``passed`` states whether the gap stayed
    within three combined standard errors.
    """

    n: int
    v_tilde: float
    v_tilde_stderr: float
    v_n: float
    v_n_stderr: float
    gap: float
    combined_stderr: float
    passed: bool

    def __post_init__(self) -> None:
        for name in ("v_tilde", "v_tilde_stderr", "v_n", "v_n_stderr", "gap", "combined_stderr"):
            object.__setattr__(self, name, _require_finite(name, float(getattr(self, name))))


@dataclass(frozen=True)
class ConvergenceReport:
    """A full ladder run: records in iteration order plus its comparisons.

    ``fitted_rate`` is the least-squares slope of ``log |err|`` against the
    iteration index over the window where errors sit above the numerical
    floor (``None`` when too few usable errors exist).  ``control_gaps``
    holds optional ``(gap, stderr)`` pairs measuring the mean squared
    distance of each iterate's actions to a known optimal control, when the
    benchmark provides one.  ``partial`` marks a ladder that aborted early
    on a numerical failure; the records collected up to that point are kept.
    """

    config: dict
    records: tuple[IterationRecord, ...]
    reference: ReferenceValue
    crosschecks: tuple[CrosscheckResult, ...] = ()
    fitted_rate: float | None = None
    control_gaps: tuple[tuple[float, float], ...] | None = None
    seed: int = 0
    versions: dict = field(default_factory=dict)
    partial: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "crosschecks", tuple(self.crosschecks))
        if self.control_gaps is not None:
            object.__setattr__(
                self,
                "control_gaps",
                tuple((float(g), float(s)) for g, s in self.control_gaps),
            )
        indices = [record.n for record in self.records]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValidationError("records must be ordered by strictly increasing n")
        object.__setattr__(self, "fitted_rate", _require_finite("fitted_rate", self.fitted_rate))

    @property
    def values(self) -> np.ndarray:
        return np.array([record.value for record in self.records], dtype=float)

    @property
    def errors(self) -> np.ndarray:
        """Signed gaps to the reference, NaN where no reference exists."""
        return np.array(
            [math.nan if record.err is None else record.err for record in self.records],
            dtype=float,
        )


def fit_rate(errors, floor: float = 1e-12) -> tuple[float, tuple[int, int]]:
    """Least-squares decay slope of ``log |e_n|`` over the pre-floor window.

    The window is the longest contiguous run of indices with
    ``|e_n| > floor`` (earliest such run on ties); entries at or below the
    floor are regarded as saturated by other error sources and excluded.
    Returns ``(slope, (start, stop))`` with ``stop`` exclusive, so the
    fitted model is ``log |e_n| ~ intercept + slope * n`` on that range.
    A geometric sequence ``e_n = q**n`` therefore yields ``log q`` exactly.

    Raises :class:`InsufficientDataError` when fewer than three usable
    points remain.
    """
    gaps = np.abs(np.asarray(errors, dtype=float))
    if gaps.ndim != 1:
        raise ValidationError("errors must be a one-dimensional sequence")
    usable = np.isfinite(gaps) & (gaps > floor)
    best_start, best_stop = 0, 0
    start = None
    for i, ok in enumerate(list(usable) + [False]):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if i - start > best_stop - best_start:
                best_start, best_stop = start, i
            start = None
    count = best_stop - best_start
    if count < 3:
        raise InsufficientDataError(
            f"rate fit needs at least 3 errors above the floor {floor:g}, "
            f"found {count}"
        )
    idx = np.arange(best_start, best_stop, dtype=float)
    logs = np.log(gaps[best_start:best_stop])
    slope = np.polyfit(idx, logs, 1)[0]
    return float(slope), (best_start, best_stop)


def runtime_versions() -> dict:
    """Version stamp recorded in every report envelope."""
    import scipy
    from importlib import metadata

    try:
        package = metadata.version("penpia")
    except metadata.PackageNotFoundError:  # running from a source tree
        package = "unknown"
    return {"penpia": package, "numpy": np.__version__, "scipy": scipy.__version__}


def format_cell(value) -> str:
    """One CSV cell: shortest round-trip form for floats, empty for None."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _record_row(record: IterationRecord) -> str:
    return ",".join(format_cell(getattr(record, column)) for column in CSV_COLUMNS)


def records_to_csv(report: ConvergenceReport) -> str:
    """Flat CSV for one ladder: a header line then one row per iterate."""
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(_record_row(record) for record in report.records)
    return "\n".join(lines) + "\n"


def converge_runs_to_csv(runs) -> str:
    """Long-format CSV for several ladders, keyed by a schedule label.

    ``runs`` is a sequence of ``(label, report)`` pairs; every row carries
    its label in the leading ``schedule`` column so the ladders can be
    compared side by side in one table.
    """
    lines = ["schedule," + ",".join(CSV_COLUMNS)]
    for label, report in runs:
        if "," in label or "\n" in label:
            raise ValidationError(f"schedule label {label!r} must not contain commas or newlines")
        lines.extend(f"{label},{_record_row(record)}" for record in report.records)
    return "\n".join(lines) + "\n"


def report_to_dict(report: ConvergenceReport) -> dict:
    """JSON-ready dictionary in the documented envelope layout."""
    return {
        "config": report.config,
        "records": [dataclasses.asdict(record) for record in report.records],
        "reference": {
            "value": report.reference.value,
            "provenance": report.reference.provenance,
            "tolerance": report.reference.tolerance,
        },
        "crosschecks": [dataclasses.asdict(check) for check in report.crosschecks],
        "fitted_rate": report.fitted_rate,
        "control_gaps": (
            None
            if report.control_gaps is None
            else [list(pair) for pair in report.control_gaps]
        ),
        "partial": report.partial,
        "seed": report.seed,
        "versions": report.versions,
    }


def report_to_json(report: ConvergenceReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a same-directory temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    descriptor, staged = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(descriptor, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(staged, path)
    except BaseException:
        if os.path.exists(staged):
            os.unlink(staged)
        raise


def write_report(report: ConvergenceReport, path, fmt: str = "csv") -> None:
    """Serialize ``report`` to ``path`` in the requested format."""
    if fmt == "csv":
        atomic_write_text(path, records_to_csv(report))
    elif fmt == "json":
        atomic_write_text(path, report_to_json(report))
    else:
        raise ValidationError(f"unknown report format {fmt!r}; expected 'csv' or 'json'")
