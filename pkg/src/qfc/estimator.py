"""Conditional-state estimator driven only by a measurement record.

The estimator integrates

    d rho_e = -i[H, rho_e] dt + kappa D[A] rho_e dt
              + 2 kappa eta (I(t) - <A>_e) H[A] rho_e dt

from an arbitrary initial guess.  Given the record of a system with the same
model it converges to that system's conditional state; started from the
true state it reproduces the true trajectory step for step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hilbert import (
    DimensionError,
    dag,
    expectation_real,
    fidelity_batch,
    purity,
    sqrtm_psd,
)
from .sme import MeasurementRecord, SmeConfig, measurement_update, sme_update

DEFAULT_THRESHOLD = 0.99
DEFAULT_WINDOW = 50


@dataclass(frozen=True)
class EstimatorState:
    rho_e: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class MismatchSpec:
    """Scalar multiplying the estimator's Hamiltonian (1.0 is a perfect model)."""

    lambda_scale: float = 1.0

    def __post_init__(self):
        if not self.lambda_scale > 0:
            raise ValueError("lambda_scale must be positive")


@dataclass
class ConvergenceReport:
    t_f: float | None
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    fidelity: np.ndarray = field(default_factory=lambda: np.empty(0))
    threshold: float = DEFAULT_THRESHOLD
    window: int = DEFAULT_WINDOW

    @property
    def fidelity_series(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.fidelity.tolist()))

    @property
    def final_fidelity(self) -> float | None:
        return float(self.fidelity[-1]) if len(self.fidelity) else None


def innovation_increment(rho_e: np.ndarray, A: np.ndarray, cfg: SmeConfig, current) -> np.ndarray:
    """Noise increment implied by a current: ``2 sqrt(kappa eta) (I - <A>_e) dt``."""
    return 2.0 * np.sqrt(cfg.kappa * cfg.eta) * (np.asarray(current) - expectation_real(A, rho_e)) * cfg.dt


def estimator_update(rho_e: np.ndarray, H: np.ndarray | None, A: np.ndarray, cfg: SmeConfig, current) -> np.ndarray:
    """Array-level estimator step; deterministic given the current."""
    return sme_update(rho_e, H, A, cfg, innovation_increment(rho_e, A, cfg, current))


def estimator_step(
    est: EstimatorState, H_total_est: np.ndarray | None, A: np.ndarray, cfg: SmeConfig, current: float
) -> EstimatorState:
    return EstimatorState(estimator_update(est.rho_e, H_total_est, A, cfg, current), est.t + cfg.dt)


def convergence_time(
    times: np.ndarray, fidelity: np.ndarray, threshold: float = DEFAULT_THRESHOLD, window: int = DEFAULT_WINDOW
) -> np.ndarray | float | None:
    """First time from which ``fidelity >= threshold`` holds for ``window`` samples.

    ``fidelity`` may carry trailing trajectory axes; the batched result uses
    NaN where convergence never happens.
    """
    fidelity = np.asarray(fidelity)
    ok = fidelity >= threshold
    n = ok.shape[0]
    if window < 1:
        raise ValueError("window must be at least 1")
    if n < window:
        result = np.full(ok.shape[1:], np.nan)
    else:
        # run[i] = number of consecutive True samples starting at i
        run = np.zeros(ok.shape, dtype=int)
        run[-1] = ok[-1]
        for i in range(n - 2, -1, -1):
            run[i] = np.where(ok[i], run[i + 1] + 1, 0)
        hit = run >= window
        first = np.argmax(hit, axis=0)
        result = np.where(hit.any(axis=0), np.asarray(times)[first], np.nan)
    if np.ndim(result) == 0:
        return None if np.isnan(result) else float(result)
    return result


def run_estimation(
    record: MeasurementRecord,
    model,
    rho_e0: np.ndarray | None = None,
    mismatch: MismatchSpec = MismatchSpec(),
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
    truth: Sequence[np.ndarray] | None = None,
    stride: int = 1,
) -> tuple[list[EstimatorState], ConvergenceReport]:
    """Replay ``record`` through an estimator built from ``model``.

    ``model`` is a :class:`qfc.scenarios.ScenarioSpec`.  When ``truth`` (the
    true states at the record times plus the final state, one more entry than
    the record) is given, the report carries the fidelity series; otherwise
    only estimator states are produced.
    """
    if len(record) == 0:
        raise ValueError("empty measurement record")
    rho = model.estimator_initial() if rho_e0 is None else np.asarray(rho_e0, dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise DimensionError(f"estimator state {rho.shape} does not match model dimension {model.dim}")
    if truth is not None and len(truth) != len(record) + 1:
        raise ValueError("truth must hold one state per record row plus the final state")
    if record.channels == 1:
        cfg = model.cfg.replace(kappa=record.kappa, eta=record.eta, dt=record.dt)
        channels = ((model.A, cfg.kappa, cfg.eta),)
    else:
        cfg = model.cfg.replace(dt=record.dt)
        channels = model.channels
        if len(channels) != record.channels:
            raise DimensionError(f"record has {record.channels} channels, model {model.name!r} has {len(channels)}")
    currents = record.currents.reshape(len(record), -1)
    t = float(record.times[0])
    history = [EstimatorState(rho, t)]
    fid_t, fid = [], []
    if truth is not None:
        fid_t.append(t)
        fid.append(float(fidelity_batch(truth[0], rho)))
    for k in range(len(record)):
        H = model.hamiltonian(record.times[k], None)
        if H is not None:
            H = mismatch.lambda_scale * H
        dW_e = np.array(
            [2.0 * np.sqrt(rate * eff) * (currents[k, j] - expectation_real(Aj, rho)) * cfg.dt for j, (Aj, rate, eff) in enumerate(channels)]
        )
        rho = measurement_update(rho, H, channels, cfg.dt, dW_e, cfg.extra_dissipators, cfg.scheme, cfg.psd_abort)
        t = float(record.times[k]) + record.dt
        if (k + 1) % stride == 0 or k == len(record) - 1:
            history.append(EstimatorState(rho, t))
        if truth is not None:
            fid_t.append(t)
            fid.append(float(fidelity_batch(truth[k + 1], rho)))
    times, fidelity = np.array(fid_t), np.array(fid)
    t_f = convergence_time(times, fidelity, threshold, window) if truth is not None else None
    return history, ConvergenceReport(t_f, times, fidelity, threshold, window)


def overlap_growth_check(rho: np.ndarray, rho_e: np.ndarray, A: np.ndarray) -> float:
    """``Tr[sqrt(rho) (A + <A>) rho_e (A + <A>) sqrt(rho)]`` with ``<A> = Tr[rho A]``.

    A trace of a positive congruence, so it is never negative; it sets the
    rate at which the overlap ``Tr[rho rho_e]`` grows.
    """
    s = sqrtm_psd(rho)
    B = A + expectation_real(A, rho) * np.eye(A.shape[0])
    return float(np.real(np.trace(s @ B @ rho_e @ dag(B) @ s)))


def sweep_tf(
    param: str,
    values: Sequence[float],
    n_seeds: int,
    model,
    horizon: float,
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
    seed: int = 0,
    dt: float | None = None,
    rho_e0: str | np.ndarray = "random",
) -> list[dict]:
    """Median convergence time for each value of ``eta`` or ``kappa``.

    Every value reuses the same seeds (common random numbers).  Runs that never
    converge are censored at ``horizon``.
    """
    from .protocol import run_protocol

    if param not in ("eta", "kappa"):
        raise ValueError(f"sweep parameter must be 'eta' or 'kappa', got {param!r}")
    rows = []
    for value in values:
        if value <= 0 or (param == "eta" and value > 1):
            raise ValueError(f"invalid {param} value {value}")
        changes = {param: value}
        if dt is not None:
            changes["dt"] = dt
        spec = model.with_config(**changes, seed=seed)
        res = run_protocol(spec, n_traj=n_seeds, horizon=horizon, stages="estimate_only", rho_e0=rho_e0)
        tf = convergence_time(res.times, res.series["fidelity"], threshold, window)
        censored = np.where(np.isnan(tf), horizon, tf)
        rows.append(
            dict(
                param=param,
                value=float(value),
                median_tf=float(np.median(censored)),
                n_seeds=int(n_seeds),
                n_converged=int(np.sum(~np.isnan(tf))),
                t_f=censored,
            )
        )
    return rows
