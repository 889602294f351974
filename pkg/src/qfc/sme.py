"""Conditioned stochastic master equation for diffusive (homodyne-type) measurement.

The conditional state obeys

    d rho = -i[H, rho] dt + kappa D[A] rho dt + sum_j gamma_j D[L_j] rho dt
            + sqrt(kappa eta) H[A] rho dW

and the detector reports the current

    I(t) = <A>_c + dW / (dt sqrt(4 kappa eta)).

Two discretisations are provided.  ``"kraus"`` (the default) writes one step
as a normalised completely-positive map ``M rho M^dag + ...`` whose
first-order expansion is exactly the update above; it keeps every state
positive for any noise draw.  For Hermitian ``A`` the monitored part uses the
Gaussian weak-measurement operator ``exp(sqrt(kappa eta) dY A - kappa eta dt A^2)``
in the eigenbasis of ``A`` and the unmonitored part is exact dephasing in the
same basis, so the step stays contractive even when ``kappa dt |A|^2`` is
large (e.g. ``A = x^2`` on a truncated oscillator).  ``"euler"`` is the literal Euler-Maruyama
increment followed by Hermitisation, eigenvalue repair and renormalisation.
Both accept a leading batch axis on ``rho`` and ``dW`` so that ensembles can
be stepped together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import io
from .hilbert import (
    DimensionError,
    dag,
    expectation_real,
    hermitize,
    psd_repair,
)

SCHEMES = ("kraus", "euler")
STREAM_CHUNK = 4096


@dataclass(frozen=True)
class SmeConfig:
    """Measurement and integration settings for one monitored system.

    Parameters
    ----------
    kappa : float
        Measurement rate.
    eta : float
        Detector efficiency in (0, 1].
    dt : float, optional
        Step size; defaults to ``1e-3 / kappa``.
    seed : int
        Master seed; trajectory ``i`` draws from the stream ``(seed, i)``.
    extra_dissipators : sequence of (operator, rate)
        Unmonitored Lindblad channels.
    scheme : {"kraus", "euler"}
    psd_abort : float
        Eigenvalues below ``-psd_abort`` abort an ``"euler"`` step.
    stability_limit : float
        Warn when ``kappa * dt`` exceeds this value.
    """

    kappa: float
    eta: float = 1.0
    dt: float | None = None
    seed: int = 0
    extra_dissipators: tuple = ()
    scheme: str = "kraus"
    psd_abort: float = 1e-8
    stability_limit: float = 0.05

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.dt is None:
            object.__setattr__(self, "dt", 1e-3 / self.kappa)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        object.__setattr__(
            self,
            "extra_dissipators",
            tuple((np.asarray(op, dtype=complex), float(rate)) for op, rate in self.extra_dissipators),
        )
        if self.kappa * self.dt > self.stability_limit:
            warnings.warn(
                f"kappa*dt = {self.kappa * self.dt:.3g} exceeds the stability guard {self.stability_limit}",
                RuntimeWarning,
                stacklevel=3,
            )

    def replace(self, **changes) -> "SmeConfig":
        fields = dict(
            kappa=self.kappa,
            eta=self.eta,
            dt=self.dt,
            seed=self.seed,
            extra_dissipators=self.extra_dissipators,
            scheme=self.scheme,
            psd_abort=self.psd_abort,
            stability_limit=self.stability_limit,
        )
        if "kappa" in changes and "dt" not in changes:
            fields["dt"] = None
        fields.update(changes)
        return SmeConfig(**fields)


class WienerStream:
    """Seeded source of Wiener increments ``dW ~ Normal(0, dt)``.

    The stream for ``(seed, index)`` is independent of how many increments
    are requested at a time.
    """

    def __init__(self, seed: int, index: int = 0, dt: float = 1.0, channels: int = 1):
        self.seed = int(seed)
        self.index = int(index)
        self.dt = float(dt)
        self.channels = int(channels)
        self._rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.index]))
        self._buf = np.empty((0, self.channels))

    def take(self, n: int) -> np.ndarray:
        """Next ``n`` increments, shape ``(n,)`` for one channel else ``(n, channels)``."""
        while len(self._buf) < n:
            chunk = self._rng.standard_normal((STREAM_CHUNK, self.channels))
            self._buf = np.concatenate([self._buf, chunk])
        out, self._buf = self._buf[:n], self._buf[n:]
        out = out * np.sqrt(self.dt)
        return out[:, 0] if self.channels == 1 else out

    def next(self) -> float | np.ndarray:
        return self.take(1)[0]


def ensemble_increments(seed: int, indices: Sequence[int], n_steps: int, dt: float, channels: int = 1) -> np.ndarray:
    """Increments for many trajectories, shape ``(n_steps, n_traj[, channels])``."""
    draws = [WienerStream(seed, i, dt, channels).take(n_steps) for i in indices]
    return np.stack(draws, axis=1)


@dataclass(frozen=True)
class TrajectoryState:
    rho: np.ndarray
    t: float = 0.0


@dataclass
class MeasurementRecord:
    """Currents ``I(t_k)`` for the intervals ``[t_k, t_k + dt)``.

    ``currents`` has shape ``(n,)`` for one monitored channel or
    ``(n, n_channels)`` for several.
    """

    times: np.ndarray
    currents: np.ndarray
    kappa: float
    eta: float
    dt: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.currents = np.asarray(self.currents, dtype=float)
        if self.times.ndim != 1 or self.currents.ndim not in (1, 2) or len(self.currents) != len(self.times):
            raise ValueError("times and currents differ in length")
        if len(self.times) > 1 and not np.allclose(np.diff(self.times), self.dt, rtol=1e-9, atol=1e-12):
            raise ValueError("record times are not spaced by dt")

    def __len__(self):
        return len(self.times)

    @property
    def channels(self) -> int:
        return 1 if self.currents.ndim == 1 else self.currents.shape[1]

    def truncated(self, n: int) -> "MeasurementRecord":
        return MeasurementRecord(self.times[:n], self.currents[:n], self.kappa, self.eta, self.dt)

    def columns(self) -> list[str]:
        if self.currents.ndim == 1:
            return ["t", "current"]
        return ["t"] + [f"current_{j}" for j in range(self.channels)]

    def write_csv(self, path) -> None:
        cur = self.currents if self.currents.ndim == 2 else self.currents[:, None]
        io.write_table(path, self.columns(), (row for row in np.column_stack([self.times, cur])))

    @classmethod
    def read_csv(cls, path, kappa: float, eta: float, dt: float | None = None) -> "MeasurementRecord":
        header, data = io.read_table(path)
        if header[:2] == ["t", "current"]:
            currents = data[:, 1]
        elif len(header) > 1 and header[0] == "t" and all(h == f"current_{j}" for j, h in enumerate(header[1:])):
            currents = data[:, 1:]
        else:
            raise ValueError(f"{path}: expected header 't,current', got {','.join(header)}")
        times = data[:, 0]
        if dt is None:
            if len(times) < 2:
                raise ValueError("dt cannot be inferred from a record with fewer than two rows")
            dt = float(np.median(np.diff(times)))
        return cls(times, currents, kappa, eta, dt)


# ---------------------------------------------------------------- superoperators


def dissipator(A: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``D[A] rho = A rho A^dag - (A^dag A rho + rho A^dag A) / 2``."""
    if A.shape[-1] != rho.shape[-1]:
        raise DimensionError(f"operator {A.shape} and state {rho.shape} differ in dimension")
    Ad = dag(A)
    AdA = Ad @ A
    return A @ rho @ Ad - 0.5 * (AdA @ rho + rho @ AdA)


def innovation_superop(A: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``H[A] rho = A rho + rho A^dag - rho Tr[A rho + rho A^dag]``."""
    if A.shape[-1] != rho.shape[-1]:
        raise DimensionError(f"operator {A.shape} and state {rho.shape} differ in dimension")
    m = A @ rho + rho @ dag(A)
    tr = np.real(np.trace(m, axis1=-2, axis2=-1))
    return m - tr[..., None, None] * rho


def liouvillian(H: np.ndarray, c_ops: Sequence[tuple[np.ndarray, float]] = ()) -> np.ndarray:
    """Generator on row-major ``vec(rho)``: ``vec(X rho Y) = (X kron Y^T) vec(rho)``."""
    d = H.shape[0]
    eye = np.eye(d)
    L = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    for op, rate in c_ops:
        op = np.asarray(op, dtype=complex)
        odo = op.conj().T @ op
        L += rate * (np.kron(op, op.conj()) - 0.5 * np.kron(odo, eye) - 0.5 * np.kron(eye, odo.T))
    return L


def lindblad_solve(rho0: np.ndarray, H: np.ndarray, c_ops, times: Sequence[float]) -> np.ndarray:
    """Unconditional master-equation solution at ``times`` by exact exponentiation."""
    from scipy.linalg import expm

    L = liouvillian(H, c_ops)
    d = rho0.shape[0]
    out = []
    for t in times:
        out.append((expm(L * t) @ rho0.reshape(-1)).reshape(d, d))
    return np.array(out)


# ---------------------------------------------------------------- stepping


def _channels(A, cfg: SmeConfig):
    return [(np.asarray(A, dtype=complex), cfg.kappa, cfg.eta)]


_MEMO: dict = {}


def _memo(kind: str, arr: np.ndarray, extra, build):
    """Cache ``build()`` on the contents of ``arr``; operators repeat every step."""
    key = (kind, arr.shape, arr.dtype.str, arr.tobytes(), extra)
    hit = _MEMO.get(key)
    if hit is None:
        if len(_MEMO) >= 128:
            _MEMO.clear()
        hit = _MEMO[key] = build()
    return hit


def _cayley(H: np.ndarray, dt: float) -> np.ndarray:
    def build():
        eye = np.eye(H.shape[-1])
        half = 0.5j * dt * H
        return np.linalg.solve(eye + half, eye - half)

    if H.ndim == 2:
        return _memo("cayley", H, dt, build)
    return build()


def measurement_update(
    rho: np.ndarray,
    H: np.ndarray | None,
    channels: Sequence[tuple[np.ndarray, float, float]],
    dt: float,
    dW: np.ndarray,
    dissipators: Sequence[tuple[np.ndarray, float]] = (),
    scheme: str = "kraus",
    psd_abort: float = 1e-8,
) -> np.ndarray:
    """One step of a multi-channel diffusive SME.

    Parameters
    ----------
    rho : array, shape (..., d, d)
    H : array, shape (d, d) or (..., d, d), or None
    channels : sequence of (A, rate, efficiency)
        Monitored operators; each contributes ``rate D[A]`` and
        ``sqrt(rate eff) H[A] dW_j``.
    dW : array, shape (...) for one channel or (..., n_channels)
    """
    dW = np.asarray(dW, dtype=float)
    if len(channels) == 1 and dW.shape == rho.shape[:-2]:
        dW = dW[..., None]
    if dW.shape != rho.shape[:-2] + (len(channels),):
        raise ValueError(f"noise shape {dW.shape} does not match {len(channels)} channel(s)")
    d = rho.shape[-1]
    for A, _, _ in channels:
        if A.shape != (d, d):
            raise DimensionError(f"measurement operator {A.shape} does not act on dimension {d}")

    if scheme == "euler":
        drift = np.zeros_like(rho)
        if H is not None:
            drift = drift - 1j * (H @ rho - rho @ H)
        for A, rate, _ in channels:
            drift = drift + rate * dissipator(A, rho)
        for L, rate in dissipators:
            drift = drift + rate * dissipator(L, rho)
        new = rho + drift * dt
        for j, (A, rate, eff) in enumerate(channels):
            new = new + np.sqrt(rate * eff) * innovation_superop(A, rho) * dW[..., j, None, None]
        new = hermitize(new)
        new = new / np.real(np.trace(new, axis1=-2, axis2=-1))[..., None, None]
        if new.ndim == 2:
            return psd_repair(new, psd_abort)
        return np.stack([psd_repair(r, psd_abort) for r in new.reshape(-1, d, d)]).reshape(new.shape)

    if not all(_is_hermitian(A) for A, _, _ in channels):
        return _first_order_step(rho, H, channels, dt, dW, dissipators)

    # means enter the innovation, so take them before anything moves the state
    means = [expectation_real(A, rho) for A, _, _ in channels]
    for A, rate, eff in channels:
        if eff < 1:
            rho = _dephase(rho, A, (1 - eff) * rate * dt)
    K = np.eye(d, dtype=complex)
    for L, rate in dissipators:
        K = K - 0.5 * rate * dt * (dag(L) @ L)
    M = K if H is None else _cayley(H, dt) @ K
    for j, ((A, rate, eff), mean) in enumerate(zip(channels, means)):
        a, V = _eig(A)
        s = np.sqrt(rate * eff)
        dY = dW[..., j] + 2.0 * s * mean * dt
        m = np.exp(s * dY[..., None] * a - rate * eff * dt * a**2)
        if V is None:
            M = M * m[..., None, :]
        else:
            M = ((M @ V) * m[..., None, :]) @ dag(V)
    new = M @ rho @ dag(M)
    for L, rate in dissipators:
        new = new + rate * dt * _sandwich(L, rho)
    new = hermitize(new)
    return new / np.real(np.trace(new, axis1=-2, axis2=-1))[..., None, None]


def _is_hermitian(A: np.ndarray) -> bool:
    return _memo("hermitian", A, None, lambda: bool(np.allclose(A, dag(A), rtol=0.0, atol=1e-12)))


def _eig(A: np.ndarray):
    """Eigenvalues and eigenvectors of Hermitian ``A``; ``V is None`` when ``A`` is diagonal."""

    def build():
        if not np.any(A - np.diag(np.diag(A))):
            return np.real(np.diag(A)).copy(), None
        return np.linalg.eigh(A)

    return _memo("eig", A, None, build)


def _dephase(rho: np.ndarray, A: np.ndarray, strength: float) -> np.ndarray:
    """Exact ``exp(strength D[A])`` for Hermitian ``A``: damp coherences between its eigenspaces."""
    a, V = _eig(A)
    G = _memo("dephase", A, strength, lambda: np.exp(-0.5 * strength * (a[:, None] - a[None, :]) ** 2))
    if V is None:
        return rho * G
    return V @ ((dag(V) @ rho @ V) * G) @ dag(V)


def _first_order_step(rho, H, channels, dt, dW, dissipators):
    """Kraus step truncated at first order; used for non-Hermitian measured operators."""
    d = rho.shape[-1]
    K = np.eye(d, dtype=complex)
    jump_terms = np.zeros_like(rho)
    for L, rate in dissipators:
        K = K - 0.5 * rate * dt * (dag(L) @ L)
        jump_terms = jump_terms + rate * dt * _sandwich(L, rho)
    for j, (A, rate, eff) in enumerate(channels):
        mean = 0.5 * expectation_real(A + dag(A), rho)
        dY = dW[..., j] + 2.0 * np.sqrt(rate * eff) * mean * dt
        K = K - 0.5 * rate * dt * (dag(A) @ A)
        K = K + np.sqrt(rate * eff) * dY[..., None, None] * A
        K = K + 0.5 * rate * eff * (dY**2 - dt)[..., None, None] * (A @ A)
        if eff < 1:
            jump_terms = jump_terms + (1 - eff) * rate * dt * _sandwich(A, rho)
    M = K if H is None else _cayley(H, dt) @ K
    new = hermitize(M @ rho @ dag(M) + jump_terms)
    return new / np.real(np.trace(new, axis1=-2, axis2=-1))[..., None, None]


def _sandwich(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``L rho L^dag``, by indexing when every row of ``L`` has at most one nonzero."""
    nz = L != 0
    if np.all(nz.sum(axis=1) <= 1):
        cols = np.argmax(nz, axis=1)
        vals = L[np.arange(L.shape[0]), cols]
        return vals[:, None] * rho[..., cols[:, None], cols[None, :]] * vals.conj()[None, :]
    return L @ rho @ dag(L)


def sme_update(rho: np.ndarray, H: np.ndarray | None, A: np.ndarray, cfg: SmeConfig, dW) -> np.ndarray:
    """Array-level single-channel step (batched over leading axes)."""
    return measurement_update(
        rho, H, _channels(A, cfg), cfg.dt, dW, cfg.extra_dissipators, cfg.scheme, cfg.psd_abort
    )


def sme_step(state: TrajectoryState, H_total: np.ndarray | None, A: np.ndarray, cfg: SmeConfig, dW) -> TrajectoryState:
    """Advance a conditioned state by one step of size ``cfg.dt``."""
    return TrajectoryState(sme_update(state.rho, H_total, A, cfg, dW), state.t + cfg.dt)


def sample_current(rho: np.ndarray, A: np.ndarray, cfg: SmeConfig, dW):
    """Detector output for the interval whose backaction uses the same ``dW``."""
    return expectation_real(A, rho) + np.asarray(dW) / (cfg.dt * np.sqrt(4 * cfg.kappa * cfg.eta))


def run_trajectory(
    H_builder: Callable[[float, object], np.ndarray] | np.ndarray | None,
    A: np.ndarray,
    rho0: np.ndarray,
    cfg: SmeConfig,
    n_steps: int,
    controller: Callable[[float, np.ndarray], object] | None = None,
    stride: int = 1,
    index: int = 0,
    t0: float = 0.0,
) -> tuple[list[TrajectoryState], MeasurementRecord]:
    """Simulate one unravelling and its measurement record.

    ``H_builder`` is either a fixed Hamiltonian or a callable ``(t, control)``
    returning the total Hamiltonian for the step starting at ``t``;
    ``control`` is whatever ``controller(t, rho)`` returns (None without one).
    States are kept every ``stride`` steps, including the initial state.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    stream = WienerStream(cfg.seed, index, cfg.dt)
    dWs = stream.take(n_steps)
    rho = np.asarray(rho0, dtype=complex)
    history = [TrajectoryState(rho, t0)]
    times = t0 + cfg.dt * np.arange(n_steps)
    currents = np.empty(n_steps)
    for k in range(n_steps):
        t = times[k]
        control = controller(t, rho) if controller is not None else None
        if callable(H_builder):
            H = H_builder(t, control)
        else:
            H = H_builder
        currents[k] = sample_current(rho, A, cfg, dWs[k])
        rho = sme_update(rho, H, A, cfg, dWs[k])
        if (k + 1) % stride == 0:
            history.append(TrajectoryState(rho, t0 + (k + 1) * cfg.dt))
    return history, MeasurementRecord(times, currents, cfg.kappa, cfg.eta, cfg.dt)


def run_ensemble(
    H: np.ndarray | None,
    A: np.ndarray,
    rho0: np.ndarray,
    cfg: SmeConfig,
    n_steps: int,
    n_traj: int,
    observables: dict[str, np.ndarray] | None = None,
    stride: int = 1,
    first_index: int = 0,
) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """Step ``n_traj`` independent trajectories together (no feedback).

    Returns the sample times, a dict of expectation values with shape
    ``(n_samples, n_traj)`` and the final states ``(n_traj, d, d)``.
    Trajectory ``i`` uses the stream ``(cfg.seed, first_index + i)`` and is
    therefore identical to ``run_trajectory(..., index=first_index + i)``.
    """
    observables = observables or {}
    dWs = ensemble_increments(cfg.seed, range(first_index, first_index + n_traj), n_steps, cfg.dt)
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_traj,) + rho0.shape[-2:]).copy()
    times = [0.0]
    values = {k: [expectation_real(op, rho)] for k, op in observables.items()}
    for k in range(n_steps):
        rho = sme_update(rho, H, A, cfg, dWs[k])
        if (k + 1) % stride == 0:
            times.append((k + 1) * cfg.dt)
            for name, op in observables.items():
                values[name].append(expectation_real(op, rho))
    return np.array(times), {k: np.array(v) for k, v in values.items()}, rho


def run_sse_trajectory(
    H: np.ndarray | None,
    X: np.ndarray,
    psi0: np.ndarray,
    cfg: SmeConfig,
    n_steps: int,
    index: int = 0,
    stride: int = 1,
) -> list[np.ndarray]:
    """Pure-state unravelling at unit efficiency, for cross-checking the SME.

    Integrates the linear form ``d psi = {-iH dt - kappa/2 X^2 dt + sqrt(kappa) X dY} psi``
    with ``dY = dW + 2 sqrt(kappa) <X> dt``, including the Milstein term
    ``kappa/2 X^2 (dY^2 - dt)``, and renormalises after every step.  Uses the
    same noise stream as :func:`run_trajectory` for the same ``(seed, index)``.
    """
    if cfg.eta != 1 or cfg.extra_dissipators:
        raise ValueError("the stochastic Schroedinger equation needs eta = 1 and no extra dissipators")
    kappa, dt = cfg.kappa, cfg.dt
    dWs = WienerStream(cfg.seed, index, dt).take(n_steps)
    psi = np.asarray(psi0, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    X2 = X @ X
    drift = -0.5 * kappa * X2 * dt
    if H is not None:
        drift = drift - 1j * H * dt
    out = [psi]
    for step in range(n_steps):
        dY = dWs[step] + 2.0 * np.sqrt(kappa) * np.real(np.vdot(psi, X @ psi)) * dt
        gen = drift + np.sqrt(kappa) * dY * X + 0.5 * kappa * (dY**2 - dt) * X2
        psi = psi + gen @ psi
        psi = psi / np.linalg.norm(psi)
        if (step + 1) % stride == 0:
            out.append(psi)
    return out
