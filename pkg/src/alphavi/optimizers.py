"""SGD and Adam loops, the step-size sweep protocol, and error metrics.

Parameters are flat ``float64`` vectors. Two boolean masks shape every update:

* ``trainable``: components allowed to move (the mean is frozen in the
  Gaussian scale experiments);
* ``positive``: components clipped to at least ``POSITIVITY_FLOOR`` after each
  step (``sigma``, or the diagonal of a Cholesky factor).

A run aborts, rather than crashing, when a gradient or an iterate stops being
finite; the trace records the step at which that happened.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core_math import RngStream
from .errors import NonFinite

POSITIVITY_FLOOR = 1e-6
DEFAULT_GRID = tuple(10.0**i for i in range(-7, 8))


def project(params: np.ndarray, positive: Optional[np.ndarray], floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    if positive is None:
        return params
    return np.where(positive, np.maximum(params, floor), params)


def _masked(grad: np.ndarray, trainable: Optional[np.ndarray]) -> np.ndarray:
    grad = np.asarray(getattr(grad, "values", grad), dtype=np.float64)
    return grad if trainable is None else np.where(trainable, grad, 0.0)


def sgd_step(params, grad, step_size: float, positive=None, trainable=None) -> np.ndarray:
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    g = _masked(grad, trainable)
    if not np.all(np.isfinite(g)):
        raise NonFinite("non-finite gradient")
    return project(np.asarray(params, dtype=np.float64) - step_size * g, positive)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def to_dict(self) -> dict:
        # float.hex keeps the round trip exact
        return {"m": [float(x).hex() for x in self.m], "v": [float(x).hex() for x in self.v], "t": self.t}

    @classmethod
    def from_dict(cls, data: dict) -> "AdamState":
        return cls(
            np.array([float.fromhex(x) for x in data["m"]]),
            np.array([float.fromhex(x) for x in data["v"]]),
            int(data["t"]),
        )


def adam_step(
    params,
    grad,
    state: AdamState,
    step_size: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_adam: float = 1e-8,
    positive=None,
    trainable=None,
):
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    g = _masked(grad, trainable)
    if not np.all(np.isfinite(g)):
        raise NonFinite("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = np.asarray(params, dtype=np.float64) - step_size * m_hat / (np.sqrt(v_hat) + eps_adam)
    return project(new, positive), AdamState(m, v, t)


@dataclass
class RunTrace:
    steps: np.ndarray
    errors: np.ndarray
    loss_steps: np.ndarray
    losses: np.ndarray
    metadata: dict = field(default_factory=dict)
    final_params: Optional[np.ndarray] = None
    param_history: Optional[list] = None

    @property
    def aborted(self) -> bool:
        return self.metadata.get("aborted_at") is not None

    @property
    def final_error(self) -> float:
        return math.inf if self.aborted else float(self.errors[-1])


GradFn = Callable[[np.ndarray, RngStream], np.ndarray]


def run(
    grad_fn: GradFn,
    init_params,
    step_size: float,
    rng: RngStream,
    steps: int = 1000,
    optimizer: str = "sgd",
    error_fn: Optional[Callable[[np.ndarray], float]] = None,
    positive=None,
    trainable=None,
    loss_fn: Optional[Callable[[np.ndarray, RngStream], float]] = None,
    loss_every: int = 10,
    record_every: Optional[int] = None,
    metadata: Optional[dict] = None,
) -> RunTrace:
    """Minimize with ``grad_fn(params, rng) -> gradient`` for ``steps`` iterations.

    ``error_fn`` is recorded at steps ``0..steps``. ``loss_fn(params, rng)`` is
    recorded every ``loss_every`` steps and at the last step. With
    ``record_every`` the parameters are kept at that cadence as well.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    params = project(np.array(init_params, dtype=np.float64), positive)
    state = AdamState.zeros(params.shape[0])
    errors = np.full(steps + 1, np.nan)
    loss_steps, losses, history = [], [], []
    grad_rng, loss_rng = rng.substream(0), rng.substream(1)
    meta = dict(metadata or {})
    meta.update(step_size=step_size, optimizer=optimizer, steps=steps, aborted_at=None)

    def record(t):
        if error_fn is not None:
            errors[t] = error_fn(params)
        if loss_fn is not None and (t % loss_every == 0 or t == steps):
            loss_steps.append(t)
            losses.append(loss_fn(params, loss_rng))
        if record_every is not None and (t % record_every == 0 or t == steps):
            history.append((t, params.copy()))

    record(0)
    # divergent step sizes are expected in a sweep; they are detected explicitly
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, steps + 1):
            try:
                g = grad_fn(params, grad_rng)
                if optimizer == "sgd":
                    new = sgd_step(params, g, step_size, positive, trainable)
                else:
                    new, state = adam_step(params, g, state, step_size, positive=positive, trainable=trainable)
                if not np.all(np.isfinite(new)):
                    raise NonFinite("non-finite iterate")
                params = new
                record(t)
            except (NonFinite, FloatingPointError, OverflowError):
                meta["aborted_at"] = t
                break
    return RunTrace(
        steps=np.arange(steps + 1),
        errors=errors,
        loss_steps=np.array(loss_steps, dtype=int),
        losses=np.array(losses, dtype=np.float64),
        metadata=meta,
        final_params=params,
        param_history=history if record_every is not None else None,
    )


@dataclass
class SweepCell:
    step_size: float
    traces: list
    failed: bool
    score: float

    @property
    def n_aborted(self) -> int:
        return sum(t.aborted for t in self.traces)

    def mean_errors(self) -> np.ndarray:
        return np.mean([t.errors for t in self.traces], axis=0)

    def stderr_errors(self) -> np.ndarray:
        errs = np.array([t.errors for t in self.traces])
        if errs.shape[0] < 2:
            return np.zeros(errs.shape[1])
        return errs.std(axis=0, ddof=1) / math.sqrt(errs.shape[0])


@dataclass
class SweepResult:
    cells: list
    chosen_index: Optional[int]
    maximize: bool = False

    @property
    def chosen_step_size(self) -> Optional[float]:
        return None if self.chosen_index is None else self.cells[self.chosen_index].step_size

    @property
    def chosen(self) -> Optional[SweepCell]:
        return None if self.chosen_index is None else self.cells[self.chosen_index]


def final_error_score(traces: Sequence[RunTrace]) -> float:
    """Mean final error; any aborted replication disqualifies the cell."""
    return float(np.mean([t.final_error for t in traces]))


def sweep(
    run_fn: Callable[[float, RngStream], RunTrace],
    grid: Sequence[float] = DEFAULT_GRID,
    replications: int = 15,
    seed_base: int = 0,
    score_fn: Callable[[Sequence[RunTrace]], float] = final_error_score,
    maximize: bool = False,
    workers: int = 1,
) -> SweepResult:
    """Run every (step size, replication) pair and pick the best step size.

    Replication ``r`` of grid cell ``i`` draws from
    ``RngStream(seed_base).substream(i, r)``. Ties go to the smaller step size.
    """
    if len(grid) == 0:
        raise ValueError("step-size grid is empty")
    if replications < 1:
        raise ValueError("replications must be >= 1")
    root = RngStream(seed_base)
    jobs = [(i, r) for i in range(len(grid)) for r in range(replications)]

    def work(job):
        i, r = job
        return run_fn(float(grid[i]), root.substream(i, r))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(work, jobs))
    else:
        traces = [work(j) for j in jobs]

    cells = []
    for i, step in enumerate(grid):
        cell_traces = traces[i * replications : (i + 1) * replications]
        failed = all(t.aborted for t in cell_traces)
        score = score_fn(cell_traces) if not failed else math.nan
        cells.append(SweepCell(float(step), cell_traces, failed, score))

    best = None
    for i in sorted(range(len(cells)), key=lambda k: cells[k].step_size):
        s = cells[i].score
        if cells[i].failed or not np.isfinite(s):
            continue
        if best is None or (s > cells[best].score if maximize else s < cells[best].score):
            best = i
    return SweepResult(cells, best, maximize)


def scale_error(q) -> float:
    """Mean squared distance of the scales from one (the standard normal target)."""
    sigma = np.asarray(getattr(q, "scales", q), dtype=np.float64)
    return float(np.mean((sigma - 1.0) ** 2))
