"""Dataset containers, CSV ingestion and study validation."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MIN_UNITS_PER_LEVEL = 10


class DataFormatError(ValueError):
    """Malformed input file (missing column, non-numeric or missing cell)."""


class ValidationError(ValueError):
    """Data violate a precondition of the estimation procedure."""


@dataclass(frozen=True)
class MainDataset:
    """Complete-case data: outcome ``y``, dense exposure ``x`` in 0..L, confounders ``z``."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    column_names: tuple = ()
    level_values: tuple = ()
    outcome_name: str = "y"
    exposure_name: str = "x"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if y.ndim != 1 or x.ndim != 1 or z.ndim != 2:
            raise ValidationError("y and x must be vectors and z a matrix")
        if not (y.shape[0] == x.shape[0] == z.shape[0]):
            raise ValidationError(
                f"length mismatch: y={y.shape[0]}, x={x.shape[0]}, z rows={z.shape[0]}")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(z)):
            raise ValidationError("main data must not contain missing or non-finite values")
        if x.size and (not np.all(np.equal(np.mod(x, 1), 0)) or x.min() < 0):
            raise ValidationError("exposure codes must be non-negative integers")
        x = x.astype(np.int64)
        n_levels = int(x.max()) + 1 if x.size else 0
        if x.size and np.unique(x).size != n_levels:
            missing = sorted(set(range(n_levels)) - set(np.unique(x).tolist()))
            raise ValidationError(f"exposure levels {missing} have no units")
        names = tuple(self.column_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise ValidationError("column_names length does not match z")
        levels = tuple(self.level_values) or tuple(range(n_levels))
        if len(levels) != n_levels:
            raise ValidationError("level_values length does not match exposure levels")
        for k, v in (("y", y), ("x", x), ("z", z), ("column_names", names),
                     ("level_values", levels)):
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.z.shape[1])

    @property
    def n_levels(self) -> int:
        return len(self.level_values)

    def subset(self, rows) -> "MainDataset":
        rows = np.asarray(rows)
        return MainDataset(self.y[rows], self.x[rows], self.z[rows], self.column_names,
                           self.level_values, self.outcome_name, self.exposure_name)


@dataclass(frozen=True)
class AuxDataset:
    """Auxiliary units: outcome and exposure only.

    ``shared`` optionally carries covariates observed in both datasets; it is
    used for membership matching and never enters estimation.
    """

    y: np.ndarray
    x: np.ndarray
    shared: Optional[np.ndarray] = None
    shared_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x).reshape(-1)
        if y.shape != x.shape:
            raise ValidationError("auxiliary y and x must have equal length")
        if not np.all(np.isfinite(y)):
            raise ValidationError("auxiliary outcome contains missing values")
        if x.size and (not np.all(np.equal(np.mod(x, 1), 0)) or x.min() < 0):
            raise ValidationError("auxiliary exposure codes must be non-negative integers")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x.astype(np.int64))
        if self.shared is not None:
            sh = np.asarray(self.shared, dtype=float)
            if sh.ndim == 1:
                sh = sh[:, None]
            if sh.shape[0] != y.shape[0]:
                raise ValidationError("shared covariates must have one row per auxiliary unit")
            object.__setattr__(self, "shared", sh)
        object.__setattr__(self, "shared_names", tuple(self.shared_names))

    @property
    def size(self) -> int:
        return int(self.y.shape[0])

    @classmethod
    def empty(cls) -> "AuxDataset":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64))

    def subset(self, rows) -> "AuxDataset":
        rows = np.asarray(rows, dtype=np.int64)
        shared = None if self.shared is None else self.shared[rows]
        return AuxDataset(self.y[rows], self.x[rows], shared, self.shared_names)


class WorkingFunction(str, Enum):
    FORM_I = "I"
    FORM_II = "II"


class LearnerKind(str, Enum):
    RIDGE_REGRESSION = "RidgeRegression"
    RIDGE_MULTINOMIAL = "RidgeMultinomial"
    RANDOM_FOREST = "RandomForest"
    GRADIENT_BOOSTING = "GradientBoosting"


FAMILY_TAG = {
    LearnerKind.RIDGE_REGRESSION: "Preg",
    LearnerKind.RIDGE_MULTINOMIAL: "Preg",
    LearnerKind.RANDOM_FOREST: "RF",
    LearnerKind.GRADIENT_BOOSTING: "GB",
}


@dataclass(frozen=True)
class LearnerSpec:
    kind: LearnerKind
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", LearnerKind(self.kind))
        hp = dict(self.hyperparams)
        if "lambdas" in hp and len(hp["lambdas"]) == 0:
            raise ValueError("ridge lambda grid must be non-empty")
        if hp.get("n_trees", 1) < 1:
            raise ValueError("n_trees must be >= 1")
        object.__setattr__(self, "hyperparams", hp)

    @property
    def family(self) -> str:
        return FAMILY_TAG[self.kind]

    def frozen(self, chosen: dict) -> "LearnerSpec":
        return LearnerSpec(self.kind, {**self.hyperparams, **chosen})


def default_ps_candidates() -> list:
    return [LearnerSpec(LearnerKind.RIDGE_MULTINOMIAL), LearnerSpec(LearnerKind.RANDOM_FOREST),
            LearnerSpec(LearnerKind.GRADIENT_BOOSTING)]


def default_cm_candidates() -> list:
    return [LearnerSpec(LearnerKind.RIDGE_REGRESSION), LearnerSpec(LearnerKind.RANDOM_FOREST),
            LearnerSpec(LearnerKind.GRADIENT_BOOSTING)]


@dataclass(frozen=True)
class StudyConfig:
    exposure_levels: Optional[int] = None
    ps_candidates: tuple = field(default_factory=lambda: tuple(default_ps_candidates()))
    cm_candidates: tuple = field(default_factory=lambda: tuple(default_cm_candidates()))
    working_function: WorkingFunction = WorkingFunction.FORM_I
    bootstrap_reps: int = 100
    seed: int = 0
    match_ratio: Optional[int] = None
    ps_clip: float = 1e-3
    el_tolerance: float = 1e-10
    el_max_iter: int = 200

    def __post_init__(self):
        object.__setattr__(self, "ps_candidates", tuple(self.ps_candidates))
        object.__setattr__(self, "cm_candidates", tuple(self.cm_candidates))
        object.__setattr__(self, "working_function", WorkingFunction(self.working_function))
        if not self.ps_candidates or not self.cm_candidates:
            raise ValueError("at least one PS and one CM candidate learner is required")
        if self.bootstrap_reps < 0:
            raise ValueError("bootstrap_reps must be >= 0")
        if not 0.0 < self.ps_clip < 0.5:
            raise ValueError("ps_clip must lie in (0, 0.5)")
        if self.match_ratio is not None and self.match_ratio < 1:
            raise ValueError("match_ratio must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _read_table(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise DataFormatError(
                f"{path}: row {i} has {len(r)} fields, header has {len(header)}")
    return header, body


def _parse_column(body, j, name, path, allow_missing=False):
    out = np.empty(len(body))
    for i, r in enumerate(body, start=1):
        cell = r[j].strip()
        if cell == "" or cell.lower() in ("na", "nan", "null"):
            if allow_missing:
                out[i - 1] = np.nan
                continue
            raise DataFormatError(f"{path}: missing value at row {i}, column {name}")
        try:
            v = float(cell)
        except ValueError:
            raise DataFormatError(
                f"{path}: non-numeric value {cell!r} at row {i}, column {name}") from None
        if not math.isfinite(v):
            raise DataFormatError(f"{path}: missing value at row {i}, column {name}")
        out[i - 1] = v
    return out


def _column_index(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise DataFormatError(f"{path}: column {name!r} not found") from None


def _integer_codes(values, name, path):
    if not np.all(np.equal(np.mod(values, 1), 0)):
        raise DataFormatError(f"{path}: exposure column {name} must hold integer codes")
    return values.astype(np.int64)


def load_main_csv(path, outcome_col: str, exposure_col: str) -> MainDataset:
    """Read the main dataset; every other column is a numeric confounder.

    Exposure codes are re-coded to dense levels ``0..L`` in numeric order; the
    original codes are kept in ``level_values``.
    """
    header, body = _read_table(path)
    jy = _column_index(header, outcome_col, path)
    jx = _column_index(header, exposure_col, path)
    y = _parse_column(body, jy, outcome_col, path)
    raw = _integer_codes(_parse_column(body, jx, exposure_col, path), exposure_col, path)
    zcols = [j for j in range(len(header)) if j not in (jy, jx)]
    z = np.column_stack([_parse_column(body, j, header[j], path) for j in zcols]) \
        if zcols else np.zeros((len(body), 0))
    levels = tuple(int(v) for v in np.unique(raw))
    x = np.searchsorted(np.asarray(levels), raw)
    return MainDataset(y, x, z, tuple(header[j] for j in zcols), levels,
                       outcome_col, exposure_col)


def load_aux_csv(path, outcome_col: str, exposure_col: str,
                 level_values: Optional[Sequence[int]] = None,
                 keep_cols: Sequence[str] = ()) -> AuxDataset:
    """Read the auxiliary dataset (outcome and exposure only).

    Columns other than the outcome, exposure and ``keep_cols`` are dropped with
    a warning. When ``level_values`` (the main data's codes) is given, exposure
    codes are mapped onto the main data's dense levels.
    """
    header, body = _read_table(path)
    jy = _column_index(header, outcome_col, path)
    jx = _column_index(header, exposure_col, path)
    keep = [_column_index(header, c, path) for c in keep_cols]
    dropped = len(header) - 2 - len(keep)
    if dropped > 0:
        warnings.warn(f"{dropped} covariate column{'s' if dropped != 1 else ''} ignored "
                      "in auxiliary data", stacklevel=2)
    y = _parse_column(body, jy, outcome_col, path)
    raw = _integer_codes(_parse_column(body, jx, exposure_col, path), exposure_col, path)
    if level_values is None:
        level_values = tuple(int(v) for v in np.unique(raw))
    lv = np.asarray(level_values, dtype=np.int64)
    unknown = sorted(set(np.unique(raw).tolist()) - set(lv.tolist()))
    if unknown:
        raise ValidationError(
            f"exposure level(s) {unknown} present in auxiliary data but absent in main data")
    x = np.searchsorted(lv, raw)
    shared = None
    if keep:
        shared = np.column_stack([_parse_column(body, j, header[j], path) for j in keep])
    return AuxDataset(y, x, shared, tuple(keep_cols))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_main_csv(ds: MainDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([ds.outcome_name, ds.exposure_name, *ds.column_names])
        for i in range(ds.n):
            w.writerow([_fmt(ds.y[i]), str(ds.level_values[ds.x[i]]),
                        *(_fmt(v) for v in ds.z[i])])


def write_aux_csv(ds: AuxDataset, path, level_values=None, outcome_name="y",
                  exposure_name="x") -> None:
    codes = level_values or tuple(range(int(ds.x.max()) + 1 if ds.size else 0))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([outcome_name, exposure_name, *ds.shared_names])
        for i in range(ds.size):
            extra = [] if ds.shared is None else [_fmt(v) for v in ds.shared[i]]
            w.writerow([_fmt(ds.y[i]), str(codes[ds.x[i]]), *extra])


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    level_counts: tuple
    aux_level_counts: tuple
    notes: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    # set once propensity predictions exist
    ps_saturation: Optional[bool] = None


def validate_study(main: MainDataset, aux: Optional[AuxDataset] = None,
                   config: Optional[StudyConfig] = None) -> ValidationReport:
    """Check the data-verifiable preconditions of estimation.

    Raises ``ValidationError`` when any exposure level has fewer than
    ``MIN_UNITS_PER_LEVEL`` main units (so that each cross-fitting half keeps
    at least five) or when the auxiliary data use an unknown level.
    """
    aux = aux if aux is not None else AuxDataset.empty()
    L1 = main.n_levels
    if config is not None and config.exposure_levels is not None \
            and config.exposure_levels != L1:
        raise ValidationError(
            f"config declares {config.exposure_levels} exposure levels, data have {L1}")
    if L1 < 2:
        raise ValidationError("at least two exposure levels are required")
    counts = np.bincount(main.x, minlength=L1)
    low = [(lvl, int(c)) for lvl, c in enumerate(counts) if c < MIN_UNITS_PER_LEVEL]
    if low:
        desc = ", ".join(f"level {main.level_values[l]} has {c}" for l, c in low)
        raise ValidationError(
            f"each exposure level needs at least {MIN_UNITS_PER_LEVEL} main units: {desc}")
    if aux.size and (aux.x.max() >= L1):
        raise ValidationError("auxiliary exposure levels must be a subset of the main levels")
    aux_counts = np.bincount(aux.x, minlength=L1) if aux.size else np.zeros(L1, dtype=int)
    report = ValidationReport(tuple(int(c) for c in counts), tuple(int(c) for c in aux_counts))
    if aux.size == 0:
        report.notes.append("no auxiliary data: CMLIB will equal CML")
    else:
        report.notes.append(f"rho_hat = 1 - n/N = {1 - main.n / (main.n + aux.size):.4f}")
    return report
