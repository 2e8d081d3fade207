"""Bayesian logistic regression and the alpha-ELBO objective.

The joint density is ``p(x, z) = N(z; 0, prior_scale^2 I) * prod_n sigmoid(y_n <z, x_n>)``
with labels in ``{-1, +1}`` and no intercept. It is unnormalized in ``z``, so
the alpha-ELBO ``(E_q[(p(x,z)/q(z))^alpha] - 1) / (alpha (1 - alpha))`` is a
lower bound rather than a divergence.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core_math import RngStream
from .errors import MissingClass, NonFinite, ParseError, RegimeUnsupported
from .estimators import AlphaParam, GradEstimate, Regime, drep_grad_samples, ratio_power

DEFAULT_SUBSET = 100
_ROW_BLOCK = 64


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (n, d) and labels (n,)")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _same_label(a: str, b) -> bool:
    b = str(b).strip()
    if _is_number(a) and _is_number(b):
        return float(a) == float(b)
    return a == b


def load_csv(
    path: Union[str, Path],
    label_column: Union[int, str] = -1,
    positive_label=None,
    classes: Optional[Sequence] = None,
    name: Optional[str] = None,
) -> Dataset:
    """Read a comma-separated file of numeric features and one label column.

    A header row is detected when the first row has a non-numeric field in a
    column that is numeric in the second row. ``classes`` keeps only rows
    whose label is listed; ``positive_label`` (default: first label seen) maps
    to +1 and everything else to -1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [[c.strip() for c in row] for row in csv.reader(fh) if any(c.strip() for c in row)]
    if not rows:
        raise ParseError(0, 0, "empty file")

    header = None
    if len(rows) > 1 and any(not _is_number(a) and _is_number(b) for a, b in zip(rows[0], rows[1])):
        header, rows = rows[0], rows[1:]
        first_row = 1
    else:
        first_row = 0

    width = len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ParseError(0, label_column, "label column not found in header")
        label_idx = header.index(label_column)
    else:
        label_idx = label_column % width

    features, labels = [], []
    for i, row in enumerate(rows):
        row_no = i + first_row
        if len(row) != width:
            raise ParseError(row_no, len(row), f"expected {width} fields")
        vals = []
        for j, cell in enumerate(row):
            if j == label_idx:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(row_no, j, f"cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise ParseError(row_no, j, f"non-finite value {cell!r}")
            vals.append(v)
        features.append(vals)
        labels.append(row[label_idx])

    if classes is not None:
        keep = [i for i, lab in enumerate(labels) if any(_same_label(lab, c) for c in classes)]
        features = [features[i] for i in keep]
        labels = [labels[i] for i in keep]
    seen = list(dict.fromkeys(labels))
    if len(seen) < 2:
        raise MissingClass(f"need two classes, found {seen}")
    positive = seen[0] if positive_label is None else str(positive_label)
    y = np.array([1.0 if _same_label(lab, positive) else -1.0 for lab in labels])
    if np.all(y == 1.0) or np.all(y == -1.0):
        raise MissingClass(f"positive label {positive!r} leaves a single class")
    return Dataset(
        np.array(features, dtype=np.float64),
        y,
        name or path.stem,
        {"source": str(path), "positive_label": positive, "classes": seen},
    )


def standardize(ds: Dataset) -> Dataset:
    """Center each column and scale it to unit (population) variance; constant columns become zero."""
    if ds.n < 2:
        raise ValueError("need at least two rows")
    X = ds.features
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    Z = np.where(std > 0, (X - mean) / safe, 0.0)
    return Dataset(Z, ds.labels, ds.name, {**ds.metadata, "standardized": True})


def subsample(ds: Dataset, n: int, rng: RngStream) -> Dataset:
    """``n`` rows without replacement, kept in file order."""
    if n >= ds.n:
        return ds
    idx = np.sort(rng.permutation(ds.n)[:n])
    y = ds.labels[idx]
    if np.all(y == y[0]):
        raise MissingClass("subsample contains a single class")
    return Dataset(ds.features[idx], y, ds.name, {**ds.metadata, "subsample_rows": idx.tolist()})


def _builtin(filename: str) -> Path:
    return Path(str(resources.files("alphavi") / "datasets" / filename))


def load_iris(standardized: bool = True) -> Dataset:
    """Iris restricted to its first two species (setosa positive), 100 rows, 4 features."""
    ds = load_csv(_builtin("iris.csv"), "species", classes=["setosa", "versicolor"], name="iris")
    return standardize(ds) if standardized else ds


def load_australian(seed: int = 0, n: int = DEFAULT_SUBSET, standardized: bool = True) -> Dataset:
    """Australian credit data, 14 features, ``n`` rows drawn with ``seed``; class 1 positive."""
    ds = load_csv(_builtin("australian.csv"), "class", positive_label="1", name="australian")
    ds = subsample(ds, n, RngStream(seed, stream_id=1))
    return standardize(ds) if standardized else ds


BUILTIN_DATASETS = {"iris": load_iris, "australian": load_australian}


class LogRegTarget:
    """Unnormalized log joint of Bayesian logistic regression, batched over ``z``."""

    normalized = False

    def __init__(self, dataset: Dataset, prior_scale: float = 1.0):
        if prior_scale <= 0:
            raise ValueError("prior_scale must be positive")
        self.dataset = dataset
        self.prior_scale = float(prior_scale)
        self._yx = dataset.labels[:, None] * dataset.features

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def log_density_and_grad(self, z):
        """Log joint and its gradient in one pass over the data."""
        z = np.asarray(z, dtype=np.float64)
        flat = z.reshape(-1, self.dim)
        loglik = np.empty(flat.shape[0])
        grad = np.empty_like(flat)
        # small row blocks keep the (rows, n_data) temporaries cache-resident
        for start in range(0, flat.shape[0], _ROW_BLOCK):
            t = flat[start : start + _ROW_BLOCK] @ self._yx.T
            a = np.abs(t)
            e = np.exp(-a)
            one_plus = 1.0 + e
            # log sigmoid(t) = -(max(-t, 0) + log(1 + exp(-|t|)))
            loglik[start : start + _ROW_BLOCK] = -np.sum(0.5 * (a - t) + np.log(one_plus), axis=-1)
            grad[start : start + _ROW_BLOCK] = (np.where(t >= 0, e, 1.0) / one_plus) @ self._yx
        s2 = self.prior_scale**2
        log_prior = -0.5 * np.sum(flat * flat, axis=-1) / s2 - self.dim * (
            0.5 * math.log(2.0 * math.pi) + math.log(self.prior_scale)
        )
        value = (loglik + log_prior).reshape(z.shape[:-1])
        return value, (grad - flat / s2).reshape(z.shape)

    def log_density(self, z) -> np.ndarray:
        return self.log_density_and_grad(z)[0]

    def grad_log_density(self, z) -> np.ndarray:
        return self.log_density_and_grad(z)[1]


def alpha_elbo_grad_samples(target, q, alpha, eps, active=None) -> np.ndarray:
    """Batched single-sample gradients of the alpha-ELBO (ascent direction).

    This is the negated doubly-reparameterized divergence gradient with ``p``
    replaced by the joint; the zero limit is the sticking-the-landing ELBO gradient.
    """
    return -drep_grad_samples(target, q, alpha, eps, active)


def alpha_elbo_grad(target, q, alpha, eps, active=None) -> GradEstimate:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 1:
        raise ValueError("single-sample estimators take eps of shape (d,)")
    g = alpha_elbo_grad_samples(target, q, alpha, eps, active)
    if not np.all(np.isfinite(g)):
        raise NonFinite("ratio power overflowed", count=1)
    return GradEstimate(g, 1)


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    stderr: float
    n_samples: int
    n_nonfinite: int = 0


def alpha_elbo_samples(target, q, alpha, eps) -> np.ndarray:
    a = AlphaParam.of(alpha)
    z = q.reparam(eps)
    lr = target.log_density(z) - q.log_density(z)
    if a.regime is Regime.ZERO_LIMIT:
        return lr
    if a.regime is Regime.ONE:
        raise RegimeUnsupported("the alpha-ELBO is undefined at alpha = 1")
    return (ratio_power(a.value, lr) - 1.0) / (a.value * (1.0 - a.value))


def alpha_elbo_estimate(target, q, alpha, n_samples: int, rng: RngStream, chunk: int = 50_000) -> ElboEstimate:
    """Monte Carlo alpha-ELBO (the ordinary ELBO in the zero limit) with its standard error."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    total, total_sq, count, bad = 0.0, 0.0, 0, 0
    # shift by the first chunk's mean so the variance is computed on small numbers
    shift = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k, start in enumerate(range(0, n_samples, chunk)):
            m = min(chunk, n_samples - start)
            vals = alpha_elbo_samples(target, q, alpha, rng.substream(k).standard_normal((m, q.dim)))
            ok = np.isfinite(vals)
            bad += int((~ok).sum())
            vals = vals[ok]
            if vals.size == 0:
                continue
            if shift is None:
                shift = float(vals.mean())
            c = vals - shift
            total += float(np.sum(c))
            total_sq += float(np.dot(c, c))
            count += vals.size
    if count < 2:
        raise NonFinite("fewer than two finite samples", count=bad)
    mean_c = np.float64(total) / count
    total_sq = np.float64(total_sq)
    var = (total_sq - count * mean_c**2) / (count - 1)
    value = float(shift + mean_c)
    var = float(var)
    if not (math.isfinite(value) and math.isfinite(var)):
        raise NonFinite("alpha-ELBO estimate overflowed", count=bad)
    return ElboEstimate(value, math.sqrt(max(var, 0.0) / count), count, bad)
