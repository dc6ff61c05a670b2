"""Datasets: tiny fixed sets, synthetic generators, CSV ingestion, splitting.

Generated regression sets are z-scored column-wise after generation; the
transform is recorded so raw values can be recovered exactly. Splitting
z-scores with statistics of the training rows only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CsvFormatError, DegenerateColumnError

SINE_NOISE_VAR = 0.025
TWO_POINTS_NOISE_VAR = 0.025


@dataclass(frozen=True)
class Standardization:
    """Affine map raw -> current:  current = (raw - mean) / std, per column."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def compose(self, other: "Standardization") -> "Standardization":
        """Net transform of applying self first, then other."""
        return Standardization(
            x_mean=self.x_mean + other.x_mean * self.x_std,
            x_std=self.x_std * other.x_std,
            y_mean=self.y_mean + other.y_mean * self.y_std,
            y_std=self.y_std * other.y_std,
        )


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str
    noise_sigma2: float
    standardization: Standardization | None = None

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (N, d_in) and y (N,) with matching N")
        if self.noise_sigma2 <= 0:
            raise ValueError("noise_sigma2 must be > 0")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        """Invert the recorded standardization; identity when none recorded."""
        if self.standardization is None:
            return self.X.copy(), self.y.copy()
        s = self.standardization
        return self.X * s.x_std + s.x_mean, self.y * s.y_std + s.y_mean

    def to_csv(self, path_or_buf) -> None:
        header = ",".join([f"x_{j}" for j in range(self.d_in)] + ["y"])
        lines = [header]
        for i in range(self.n):
            lines.append(",".join(repr(v) for v in self.X[i]) + f",{self.y[i]!r}")
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def make_two_points() -> Dataset:
    """The two observations (-1, -1) and (1, 1) with noise variance 0.025."""
    return Dataset(
        X=np.array([[-1.0], [1.0]]),
        y=np.array([-1.0, 1.0]),
        name="two_points",
        noise_sigma2=TWO_POINTS_NOISE_VAR,
    )


def _standardize_arrays(X: np.ndarray, y: np.ndarray):
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    for j, s in enumerate(x_std):
        if s < 1e-12:
            raise DegenerateColumnError(f"x_{j}")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std < 1e-12:
        raise DegenerateColumnError("y")
    return Standardization(x_mean, x_std, y_mean, y_std)


def _apply(s: Standardization, X, y):
    return (X - s.x_mean) / s.x_std, (y - s.y_mean) / s.y_std


def make_sine(n: int, rng: np.random.Generator) -> Dataset:
    """y = sin(x) + eps with x ~ U(-5, 5) and eps ~ N(0, 0.025), then z-scored."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.uniform(-5.0, 5.0, size=(n, 1))
    y = np.sin(x[:, 0]) + math.sqrt(SINE_NOISE_VAR) * rng.standard_normal(n)
    s = _standardize_arrays(x, y)
    xs, ys = _apply(s, x, y)
    return Dataset(xs, ys, name="sine", noise_sigma2=SINE_NOISE_VAR, standardization=s)


def make_toy(n: int, rng: np.random.Generator) -> Dataset:
    """y = x0 * sin(x1) + eps on U(-5,5)^2 inputs, then z-scored."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.uniform(-5.0, 5.0, size=(n, 2))
    y = x[:, 0] * np.sin(x[:, 1]) + math.sqrt(SINE_NOISE_VAR) * rng.standard_normal(n)
    s = _standardize_arrays(x, y)
    xs, ys = _apply(s, x, y)
    return Dataset(xs, ys, name="toy", noise_sigma2=SINE_NOISE_VAR, standardization=s)


def load_uci_csv(path, target_column, noise_sigma2: float = 0.025,
                 name: str | None = None) -> Dataset:
    """Read a numeric CSV with a header row; split one column off as the target.

    target_column may be a header name or a 0-based index. Rows with the
    wrong number of cells and non-numeric cells raise CsvFormatError with
    row/column indices (header is row 0).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file") from None
        header = [h.strip() for h in header]
        if isinstance(target_column, int):
            t_idx = target_column
            if not 0 <= t_idx < len(header):
                raise CsvFormatError(f"target column index {t_idx} out of range")
        else:
            if target_column not in header:
                raise CsvFormatError(f"target column {target_column!r} not in header {header}")
            t_idx = header.index(target_column)

        rows: list[list[float]] = []
        for i, row in enumerate(reader, start=1):
            if len(row) == 0 or (len(row) == 1 and not row[0].strip()):
                continue  # blank line
            if len(row) != len(header):
                raise CsvFormatError(
                    f"expected {len(header)} columns, found {len(row)}", row=i
                )
            vals = []
            for j, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(f"non-numeric cell {cell!r}", row=i, col=j) from None
                if not math.isfinite(v):
                    raise CsvFormatError(f"non-finite cell {cell!r}", row=i, col=j)
                vals.append(v)
            rows.append(vals)

    if not rows:
        raise CsvFormatError("no data rows")
    mat = np.asarray(rows, dtype=float)
    y = mat[:, t_idx]
    X = np.delete(mat, t_idx, axis=1)
    if name is None:
        name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return Dataset(X, y, name=name, noise_sigma2=noise_sigma2)


def standardize_split(ds: Dataset, test_fraction: float, rng: np.random.Generator
                      ) -> tuple[Dataset, Dataset]:
    """Shuffle, split, then z-score both splits with train-only statistics.

    Statistics are recorded (composed with any earlier transform) so the
    raw values remain recoverable. A train column with zero spread raises
    DegenerateColumnError naming the column.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    n = ds.n
    n_test = int(round(test_fraction * n))
    if n - n_test < 1:
        raise ValueError("split leaves no training rows")
    perm = rng.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    s = _standardize_arrays(ds.X[train_idx], ds.y[train_idx])
    recorded = s if ds.standardization is None else ds.standardization.compose(s)

    def build(idx) -> Dataset:
        Xs, ys = _apply(s, ds.X[idx], ds.y[idx])
        return replace(ds, X=Xs, y=ys, standardization=recorded)

    return build(train_idx), build(test_idx)
