"""Batched two-stage runs: estimate the state from the record, then control with it.

Every trajectory ``b`` owns an independent true system and estimator.  At
each step the true system emits a current (sharing its noise draw with the
back-action), the estimator is advanced from that current alone, and the
feedback law maps the (possibly delayed) estimator state to control
amplitudes that enter both Hamiltonians.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .controllers import FeedbackLaw, NoFeedback, ResetLaw
from .estimator import DEFAULT_THRESHOLD, DEFAULT_WINDOW, MismatchSpec
from .hilbert import expectation_real, fidelity_batch, purity
from .sme import WienerStream, measurement_update

STAGES = ("estimate_only", "estimate_then_control", "closed_loop_from_t0")
NOISE_BLOCK = 1024


@dataclass
class ProtocolResult:
    """Sampled series of a batched run.

    ``series`` maps names to arrays of shape ``(n_samples, n_traj)``:
    ``fidelity`` (estimator vs truth), ``fidelity_target`` and
    ``fidelity_target_est`` (truth and estimator vs target, when the scenario
    has one), ``expA_true``, ``expA_est``, ``purity_true``,
    ``purity_est`` and ``leakage``.  ``controls`` has shape
    ``(n_samples, n_traj, n_controls)`` and holds the amplitudes applied
    during the interval starting at each sample time.
    """

    times: np.ndarray
    series: dict
    controls: np.ndarray
    t_switch: np.ndarray
    t_f: np.ndarray
    pulsed: np.ndarray
    rho: np.ndarray
    rho_e: np.ndarray
    law_log: dict = field(default_factory=dict)
    currents: np.ndarray | None = None
    noise: np.ndarray | None = None

    def final_quarter_mean(self, name: str) -> np.ndarray:
        n = len(self.times)
        return self.series[name][n - max(1, n // 4):].mean(axis=0)


def _initial_batch(spec, how, indices, seed, salt):
    if how is None:
        how = spec.initial if salt == 1 else spec.estimator_init
    if isinstance(how, np.ndarray):
        how = np.asarray(how, dtype=complex)
        if how.ndim == 3:
            return how.copy()
        return np.broadcast_to(how, (len(indices),) + how.shape).copy()
    states = [spec._resolve(how, np.random.default_rng(np.random.SeedSequence([seed, int(i), salt]))) for i in indices]
    return np.array(states, dtype=complex)


def run_protocol(
    spec,
    n_traj: int = 1,
    horizon: float | None = None,
    stages: str = "estimate_then_control",
    law: FeedbackLaw | None = None,
    estimation_budget: float | None = None,
    rho0=None,
    rho_e0=None,
    mismatch: MismatchSpec = MismatchSpec(),
    delay_steps: int = 0,
    stride: int = 1,
    indices=None,
    first_index: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
    keep_currents: bool = False,
    observables: dict | None = None,
) -> ProtocolResult:
    """Run ``n_traj`` truth/estimator pairs of scenario ``spec``.

    Parameters
    ----------
    stages : {"estimate_only", "estimate_then_control", "closed_loop_from_t0"}
        In the two-stage mode, trajectory ``b`` switches to control at the
        first sample where the estimator fidelity has stayed above
        ``threshold`` for ``window`` steps, or at ``estimation_budget``,
        whichever comes first.
    rho0, rho_e0 : array, state recipe or "matched"
        Initial true / estimator states; recipes (``"random"``, ...) are
        drawn per trajectory.  ``rho_e0="matched"`` starts the estimator on
        the true state.
    delay_steps : int
        The law sees the estimator state from this many steps earlier.
    indices : sequence of int, optional
        Noise-stream index per trajectory; defaults to
        ``first_index + arange(n_traj)``.  Repeated indices give common
        random numbers.
    observables : dict of name -> operator, optional
        Extra expectation values, sampled as ``series[name]`` (truth) and
        ``series[name + "_est"]`` (estimator).
    """
    if stages not in STAGES:
        raise ValueError(f"stages must be one of {STAGES}")
    if delay_steps < 0:
        raise ValueError("delay_steps must be non-negative")
    law = law or NoFeedback()
    cfg = spec.cfg
    dt = cfg.dt
    horizon = spec.horizon if horizon is None else horizon
    budget = spec.estimation_budget if estimation_budget is None else estimation_budget
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise ValueError("horizon shorter than one step")
    indices = np.arange(first_index, first_index + n_traj) if indices is None else np.asarray(indices, dtype=int)
    B = len(indices)
    channels = spec.channels
    n_ch = len(channels)
    streams = [WienerStream(cfg.seed, int(i), dt, n_ch) for i in indices]

    rho = _initial_batch(spec, rho0, indices, cfg.seed, 1)
    rho_e = rho.copy() if isinstance(rho_e0, str) and rho_e0 == "matched" else _initial_batch(spec, rho_e0, indices, cfg.seed, 2)
    d = spec.dim
    if rho.shape != (B, d, d) or rho_e.shape != (B, d, d):
        raise ValueError(f"initial states must be {d}x{d}")

    law.reset(B)
    n_c = len(spec.control_names)
    H0 = spec.H0
    H0_est = mismatch.lambda_scale * spec.H0
    G = np.array(spec.control_generators) if n_c else None
    target = spec.target

    active = np.full(B, stages == "closed_loop_from_t0")
    switched = active.copy()
    t_switch = np.where(active, 0.0, np.nan)
    t_f = np.full(B, np.nan)
    run_len = np.zeros(B, dtype=int)
    pulsed = np.zeros(B, dtype=bool)
    delayed = deque(maxlen=delay_steps + 1)

    samples: dict[str, list] = {k: [] for k in ("fidelity", "expA_true", "expA_est", "purity_true", "purity_est", "leakage")}
    if target is not None:
        samples["fidelity_target"] = []
        samples["fidelity_target_est"] = []
    observables = dict(observables or {})
    for name in observables:
        samples[name] = []
        samples[name + "_est"] = []
    times, ctrl_hist = [], []
    currents_hist = [] if keep_currents else None
    noise_hist = [] if keep_currents else None
    A = spec.A

    def record(t, u):
        times.append(t)
        samples["fidelity"].append(fidelity_batch(rho, rho_e))
        samples["expA_true"].append(expectation_real(A, rho))
        samples["expA_est"].append(expectation_real(A, rho_e))
        samples["purity_true"].append(purity(rho))
        samples["purity_est"].append(purity(rho_e))
        samples["leakage"].append(spec.leakage(rho))
        if target is not None:
            samples["fidelity_target"].append(fidelity_batch(rho, target))
            samples["fidelity_target_est"].append(fidelity_batch(rho_e, target))
        for name, op in observables.items():
            samples[name].append(expectation_real(op, rho))
            samples[name + "_est"].append(expectation_real(op, rho_e))
        ctrl_hist.append(u)

    # the window counts integrator steps; with stride > 1 it spans fewer samples
    window_samples = max(1, -(-window // stride))

    def convergence_update(t, fid):
        nonlocal run_len
        run_len = np.where(fid >= threshold, run_len + 1, 0)
        newly = np.isnan(t_f) & (run_len >= window_samples)
        # t_f is the start of the qualifying run
        t_f[newly] = t - (window_samples - 1) * dt * stride

    u_zero = np.zeros((B, n_c))
    for k in range(n_steps):
        t = k * dt
        if stages == "estimate_then_control" and not switched.all():
            go = ~switched & (~np.isnan(t_f) | (t >= budget - 1e-12))
            if go.any():
                switched |= go
                t_switch[go] = t
                active = switched.copy()
                if isinstance(law, ResetLaw):
                    fire = go & law.pulse_mask(rho_e, spec)
                    if fire.any():
                        U = spec.ops["pi_pulse"]
                        rho[fire] = U @ rho[fire] @ U.conj().T
                        rho_e[fire] = U @ rho_e[fire] @ U.conj().T
                        pulsed |= fire

        delayed.append(rho_e.copy() if delay_steps else rho_e)
        seen = delayed[0]
        if n_c and not isinstance(law, (NoFeedback, ResetLaw)):
            u = law.controls(seen, spec, active)
            u = np.clip(u, -np.asarray(spec.control_bounds), np.asarray(spec.control_bounds))
            u = np.where(np.isfinite(u), u, 0.0)
        else:
            u = u_zero

        if k % stride == 0:
            record(t, u)
            convergence_update(t, samples["fidelity"][-1])

        if n_c and np.any(u):
            F = np.einsum("bj,jkl->bkl", u, G)
            H_true, H_est = H0 + F, H0_est + F
        else:
            H_true, H_est = H0, H0_est

        if k % NOISE_BLOCK == 0:
            block = np.stack([s.take(min(NOISE_BLOCK, n_steps - k)) for s in streams], axis=1).reshape(-1, B, n_ch)
        dW = block[k % NOISE_BLOCK]
        cur = np.empty((B, n_ch))
        dW_e = np.empty((B, n_ch))
        for j, (Aj, rate, eff) in enumerate(channels):
            cur[:, j] = expectation_real(Aj, rho) + dW[:, j] / (dt * np.sqrt(4 * rate * eff))
            dW_e[:, j] = 2.0 * np.sqrt(rate * eff) * (cur[:, j] - expectation_real(Aj, rho_e)) * dt
        if keep_currents:
            currents_hist.append(cur if n_ch > 1 else cur[:, 0])
            noise_hist.append(dW if n_ch > 1 else dW[:, 0])
        rho = measurement_update(rho, H_true, channels, dt, dW, cfg.extra_dissipators, cfg.scheme, cfg.psd_abort)
        rho_e = measurement_update(rho_e, H_est, channels, dt, dW_e, cfg.extra_dissipators, cfg.scheme, cfg.psd_abort)

    if n_steps % stride == 0:
        record(n_steps * dt, u)
        convergence_update(n_steps * dt, samples["fidelity"][-1])

    if stages == "estimate_then_control" and np.isnan(t_f).any() and budget < horizon:
        warnings.warn(
            f"{int(np.isnan(t_f).sum())} of {B} estimators did not converge before control started",
            RuntimeWarning,
            stacklevel=2,
        )
    return ProtocolResult(
        times=np.array(times),
        series={k: np.array(v) for k, v in samples.items()},
        controls=np.array(ctrl_hist),
        t_switch=t_switch,
        t_f=t_f,
        pulsed=pulsed,
        rho=rho,
        rho_e=rho_e,
        law_log=law.log(),
        currents=None if currents_hist is None else np.array(currents_hist),
        noise=None if noise_hist is None else np.array(noise_hist),
    )
