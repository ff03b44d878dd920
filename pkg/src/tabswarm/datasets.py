"""Tabular heart-risk data handling.

Ingestion from CSV, stratified splitting, per-column standardization,
Pearson correlation analysis, and a seeded synthetic generator that
produces desk-scale stand-in data following the same 13-column schema.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

FEATURE_NAMES: tuple[str, ...] = (
    "age", "sex", "cp", "trestbps", "chol", "fbs", "restecg",
    "thalachh", "exang", "oldpeak", "slope", "ca", "thal",
)
TARGET_NAME = "target"


class DataError(ValueError):
    """Base class for dataset ingestion/validation failures."""


class MissingColumn(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing required column {name!r}")


class NonNumericCell(DataError):
    """A cell could not be parsed as a finite number (or a {0,1} label)."""

    def __init__(self, row: int, column: str, raw: str):
        self.row = row
        self.column = column
        self.raw = raw
        super().__init__(
            f"row {row}, column {column!r}: cannot parse {raw!r} as a finite value"
        )


class EmptyDataset(DataError):
    def __init__(self):
        super().__init__("CSV contains a header but no data rows")


class ClassTooSmall(DataError):
    def __init__(self, label: int, count: int):
        self.label = label
        self.count = count
        super().__init__(
            f"class {label} has {count} row(s); cannot place it on both split sides"
        )


class TooFewRows(DataError):
    def __init__(self, n_rows: int, needed: int):
        super().__init__(f"need at least {needed} rows, got {n_rows}")


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus binary targets.

    `features` is (n_rows, n_features) float64, `targets` is (n_rows,)
    int64 with values in {0, 1} (1 = positive / disease present).
    """

    feature_names: tuple[str, ...]
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        targs = np.ascontiguousarray(self.targets, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[1] != len(self.feature_names):
            raise DataError(
                f"feature matrix shape {feats.shape} does not match "
                f"{len(self.feature_names)} feature names"
            )
        if targs.shape != (feats.shape[0],):
            raise DataError(
                f"targets length {targs.shape} does not match {feats.shape[0]} rows"
            )
        if not np.isfinite(feats).all():
            raise DataError("feature matrix contains NaN or infinite values")
        if targs.size and not np.isin(targs, (0, 1)).all():
            bad = targs[~np.isin(targs, (0, 1))][0]
            raise DataError(f"targets must be 0 or 1, found {bad}")
        feats.setflags(write=False)
        targs.setflags(write=False)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targs)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "Dataset":
        """Row subset in the given index order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.feature_names, self.features[idx], self.targets[idx])


@dataclass(frozen=True)
class Scaler:
    """Per-column affine standardization fitted on training rows only.

    Uses the population standard deviation. Zero-variance columns are
    flagged constant and transform to all-zeros instead of dividing by 0.
    """

    means: np.ndarray
    stds: np.ndarray
    constant: np.ndarray  # bool mask of zero-variance columns

    def __post_init__(self):
        for name in ("means", "stds", "constant"):
            arr = getattr(self, name)
            arr.setflags(write=False)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric Pearson matrix over all feature columns plus the target."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise NonNumericCell(row, column, raw) from None
    if not math.isfinite(value):
        raise NonNumericCell(row, column, raw)
    return value


def load_csv(source, schema: tuple[str, ...] = FEATURE_NAMES) -> Dataset:
    """Parse a UTF-8 CSV byte stream into a Dataset.

    `schema` lists the expected feature columns; a `target` column is
    always required. Columns are reordered to schema order; columns not
    in the schema are ignored. Raises MissingColumn, NonNumericCell
    (carrying the offending 0-based data row index), or EmptyDataset.
    """
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyDataset() from None

    positions = {name: i for i, name in enumerate(header)}
    for name in (*schema, TARGET_NAME):
        if name not in positions:
            raise MissingColumn(name)

    feature_cols = [positions[name] for name in schema]
    target_col = positions[TARGET_NAME]

    rows: list[list[float]] = []
    targets: list[int] = []
    for row_idx, record in enumerate(reader):
        if not record or all(not cell.strip() for cell in record):
            continue
        rows.append(
            [_parse_cell(record[c], row_idx, schema[j]) for j, c in enumerate(feature_cols)]
        )
        label = _parse_cell(record[target_col], row_idx, TARGET_NAME)
        if label not in (0.0, 1.0):
            raise NonNumericCell(row_idx, TARGET_NAME, record[target_col])
        targets.append(int(label))

    if not rows:
        raise EmptyDataset()
    return Dataset(tuple(schema), np.array(rows), np.array(targets))


def write_csv(dataset: Dataset, stream) -> None:
    """Write a Dataset as CSV. Float cells use shortest round-trip repr,
    so reloading recovers the exact same bits for finite values."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([*dataset.feature_names, TARGET_NAME])
    for row, label in zip(dataset.features, dataset.targets):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])


def stratified_split(
    d: Dataset, test_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Deterministic stratified train/test split.

    Each class contributes round(count * test_fraction) rows to the test
    side, clamped so both sides keep at least one row per class. Raises
    ClassTooSmall when that is impossible.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = np.unique(d.targets)
    if len(labels) < 2:
        only = int(labels[0]) if len(labels) else 0
        raise ClassTooSmall(only, d.n_rows)

    rng = np.random.default_rng(seed)
    test_idx: list[np.ndarray] = []
    train_idx: list[np.ndarray] = []
    for label in labels:
        members = np.flatnonzero(d.targets == label)
        if len(members) < 2:
            raise ClassTooSmall(int(label), len(members))
        n_test = int(round(len(members) * test_fraction))
        n_test = min(max(n_test, 1), len(members) - 1)
        order = rng.permutation(len(members))
        test_idx.append(members[order[:n_test]])
        train_idx.append(members[order[n_test:]])

    test = np.sort(np.concatenate(test_idx))
    train = np.sort(np.concatenate(train_idx))
    return d.take(train), d.take(test)


def fit_scaler(train: Dataset) -> Scaler:
    """Fit per-column mean/std (population) on the training rows."""
    if train.n_rows == 0:
        raise EmptyDataset()
    means = train.features.mean(axis=0)
    stds = train.features.std(axis=0)  # population std (ddof=0)
    constant = stds == 0.0
    safe = np.where(constant, 1.0, stds)
    return Scaler(means=means, stds=safe, constant=constant)


def apply_scaler(s: Scaler, d: Dataset) -> Dataset:
    """Standardize columns: (x - mean) / std; constant columns map to 0."""
    z = (d.features - s.means) / s.stds
    z[:, s.constant] = 0.0
    return Dataset(d.feature_names, z, d.targets)


def invert_scaler(s: Scaler, d: Dataset) -> Dataset:
    """Undo apply_scaler. Constant columns map back to their stored mean."""
    x = d.features * s.stds + s.means
    x[:, s.constant] = s.means[s.constant]
    return Dataset(d.feature_names, x, d.targets)


def pearson_matrix(d: Dataset) -> CorrelationMatrix:
    """Pearson coefficients for every column pair, target included last.

    Columns with zero variance correlate 0 with everything and 1 with
    themselves by convention, keeping the matrix NaN-free. Sums use
    math.fsum (correct rounding), so the matrix is exactly invariant
    under row permutations.
    """
    if d.n_rows < 2:
        raise TooFewRows(d.n_rows, 2)

    names = (*d.feature_names, TARGET_NAME)
    cols = np.column_stack([d.features, d.targets.astype(np.float64)])
    n_cols = cols.shape[1]
    n = d.n_rows

    means = np.array([math.fsum(cols[:, j]) / n for j in range(n_cols)])
    centered = cols - means
    sq_norms = np.array([math.fsum(centered[:, j] ** 2) for j in range(n_cols)])
    constant = sq_norms == 0.0

    values = np.zeros((n_cols, n_cols))
    for i in range(n_cols):
        values[i, i] = 1.0
        for j in range(i + 1, n_cols):
            if constant[i] or constant[j]:
                continue
            num = math.fsum(centered[:, i] * centered[:, j])
            r = num / math.sqrt(sq_norms[i] * sq_norms[j])
            r = min(1.0, max(-1.0, r))
            values[i, j] = r
            values[j, i] = r
    return CorrelationMatrix(names, values)


def correlation_to_csv(cm: CorrelationMatrix, stream, comment: str | None = None) -> None:
    """Matrix as CSV with a leading name row and column."""
    if comment:
        stream.write(f"# {comment}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["", *cm.names])
    for name, row in zip(cm.names, cm.values):
        writer.writerow([name, *(repr(float(v)) for v in row)])


def strongest_pairs(cm: CorrelationMatrix, k: int = 5) -> list[tuple[str, str, float]]:
    """The k strongest off-diagonal |r| pairs, strongest first."""
    pairs = []
    n = len(cm.names)
    for i in range(n):
        for j in range(i + 1, n):
            pairs.append((cm.names[i], cm.names[j], float(cm.values[i, j])))
    pairs.sort(key=lambda p: (-abs(p[2]), p[0], p[1]))
    return pairs[:k]


# Fixed generating parameters for the synthetic cohort. Location/scale pairs
# feed the risk rule below; ranges mimic the clinical schema's value ranges.
_GEN = {
    "age": (53.0, 9.0),
    "trestbps": (131.0, 17.0),
    "thalachh": (150.0, 23.0),
    "oldpeak": (1.0, 1.1),
}


def risk_score(features: np.ndarray) -> np.ndarray:
    """Noise-free generating rule behind synthesize_dataset.

    Nonlinear in six schema features: standardized ST depression, age,
    and peak heart rate combine additively with an exercise-angina shift,
    an age x blood-pressure interaction, and a stained-vessel step.
    Positive score means label 1.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    col = {name: i for i, name in enumerate(FEATURE_NAMES)}
    z = {
        name: (f[:, col[name]] - mu) / sd
        for name, (mu, sd) in _GEN.items()
    }
    score = (
        1.5 * z["oldpeak"]
        + 1.1 * z["age"]
        - 1.7 * z["thalachh"]
        + 0.9 * f[:, col["exang"]]
        + 0.6 * z["age"] * z["trestbps"]
        + 0.5 * (f[:, col["ca"]] >= 1.0)
        - 0.7
    )
    return score


def generating_rule(features: np.ndarray) -> np.ndarray:
    """Noise-free labels of the synthetic generator (Bayes-optimal at
    noise 0, where a perfect classifier reaches accuracy 1.0)."""
    return (risk_score(features) > 0.0).astype(np.int64)


def synthesize_dataset(n_rows: int, noise: float, seed: int) -> Dataset:
    """Seeded synthetic cohort following the 13-column schema.

    Labels follow `generating_rule`, then each label is independently
    flipped with probability `noise`, so the Bayes accuracy is 1 - noise
    (1.0 when noise is 0) and the empirical flip fraction concentrates
    around `noise`.
    """
    if n_rows < 20:
        raise DataError(f"n_rows must be >= 20, got {n_rows}")
    if not 0.0 <= noise < 0.5:
        raise DataError(f"noise must be in [0, 0.5), got {noise}")

    rng = np.random.default_rng(seed)
    n = n_rows
    cols = {
        "age": np.round(np.clip(rng.normal(53.0, 9.0, n), 29, 77)),
        "sex": rng.integers(0, 2, n).astype(np.float64),
        "cp": rng.integers(0, 4, n).astype(np.float64),
        "trestbps": np.round(np.clip(rng.normal(131.0, 17.0, n), 94, 200)),
        "chol": np.round(np.clip(rng.normal(246.0, 51.0, n), 126, 564)),
        "fbs": (rng.random(n) < 0.15).astype(np.float64),
        "restecg": rng.integers(0, 3, n).astype(np.float64),
        "thalachh": np.round(np.clip(rng.normal(150.0, 23.0, n), 71, 202)),
        "exang": (rng.random(n) < 0.33).astype(np.float64),
        "oldpeak": np.round(np.clip(np.abs(rng.normal(1.0, 1.1, n)), 0.0, 6.2), 1),
        "slope": rng.integers(0, 3, n).astype(np.float64),
        "ca": rng.integers(0, 5, n).astype(np.float64),
        "thal": rng.integers(0, 4, n).astype(np.float64),
    }
    features = np.column_stack([cols[name] for name in FEATURE_NAMES])
    labels = generating_rule(features)
    flips = rng.random(n) < noise
    labels = np.where(flips, 1 - labels, labels)
    return Dataset(FEATURE_NAMES, features, labels)
