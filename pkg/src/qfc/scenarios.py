"""Named physical systems with their default parameters.

Units: hbar = 1.  The oscillators use m = omega = 1 unless overridden; the
circuit-QED system is expressed in units of the coupling ``g`` (times in
``1/g``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import io
from .hilbert import (
    IDENTITY2,
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    DimensionError,
    HilbertSpace,
    coherent_state,
    dag,
    expectation_real,
    fock_state,
    kron,
    ladder_operators,
    maximally_mixed,
    projector,
    quadratures,
    random_density_matrix,
    random_pure_state,
    thermal_state,
)
from .sme import MeasurementRecord, SmeConfig, TrajectoryState, WienerStream, measurement_update, run_trajectory

UP = np.array([1, 0], dtype=complex)
DOWN = np.array([0, 1], dtype=complex)


def bell_target(kind: str) -> np.ndarray:
    """``(|ud> +/- |du>)/sqrt2`` projector; ``kind`` is symmetric/antisymmetric."""
    ud, du = np.kron(UP, DOWN), np.kron(DOWN, UP)
    if kind in ("symmetric", "s"):
        return projector(ud + du)
    if kind in ("antisymmetric", "a"):
        return projector(ud - du)
    raise ValueError(f"unknown target {kind!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything the simulator, estimator and controllers need about a system.

    ``channels`` lists the monitored operators as ``(A, rate, efficiency)``;
    single-channel scenarios have ``channels == ((A, kappa, eta),)``.
    ``control_generators`` are Hermitian operators ``G_j`` so that the
    feedback Hamiltonian is ``sum_j u_j G_j``.
    """

    name: str
    space: HilbertSpace
    H0: np.ndarray
    A: np.ndarray
    cfg: SmeConfig
    initial: np.ndarray | str
    estimator_init: np.ndarray | str = "mixed"
    target: np.ndarray | None = None
    control_names: tuple[str, ...] = ()
    control_generators: tuple[np.ndarray, ...] = ()
    control_bounds: tuple[float, ...] = ()
    ops: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    observation: str = "moments"
    extra_channels: tuple = ()
    fock_levels: int | None = None
    horizon: float = 10.0
    estimation_budget: float = 5.0

    def __post_init__(self):
        d = self.space.dim
        for label, op in [("H0", self.H0), ("A", self.A)] + [(f"G[{n}]", g) for n, g in zip(self.control_names, self.control_generators)]:
            if op.shape != (d, d):
                raise DimensionError(f"{self.name}: {label} has shape {op.shape}, expected {(d, d)}")
            if np.max(np.abs(op - dag(op))) > 1e-12:
                raise ValueError(f"{self.name}: {label} is not Hermitian")
        for op, _ in self.cfg.extra_dissipators:
            if op.shape != (d, d):
                raise DimensionError(f"{self.name}: dissipator of shape {op.shape}, expected {(d, d)}")
        for op, _, _ in self.extra_channels:
            if op.shape != (d, d):
                raise DimensionError(f"{self.name}: channel operator of shape {op.shape}")
        if isinstance(self.initial, np.ndarray) and self.initial.shape != (d, d):
            raise DimensionError(f"{self.name}: initial state of shape {self.initial.shape}")
        if self.target is not None and self.target.shape != (d, d):
            raise DimensionError(f"{self.name}: target of shape {self.target.shape}")

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def channels(self) -> tuple:
        if self.extra_channels:
            return self.extra_channels
        return ((self.A, self.cfg.kappa, self.cfg.eta),)

    def with_config(self, **changes) -> "ScenarioSpec":
        return replace(self, cfg=self.cfg.replace(**changes))

    def hamiltonian(self, t: float = 0.0, controls=None) -> np.ndarray:
        """``H0 + sum_j u_j G_j``; batched when ``controls`` has shape (B, n)."""
        if controls is None or not self.control_generators:
            return self.H0
        controls = np.asarray(controls, dtype=float)
        G = np.array(self.control_generators)
        return self.H0 + np.einsum("...j,jkl->...kl", controls, G)

    def feedback(self, controls) -> np.ndarray:
        G = np.array(self.control_generators)
        return np.einsum("...j,jkl->...kl", np.asarray(controls, dtype=float), G)

    def step(self, rho, H, dW):
        """One conditioned step using all of this scenario's channels."""
        return measurement_update(
            rho, H, self.channels, self.cfg.dt, dW, self.cfg.extra_dissipators, self.cfg.scheme, self.cfg.psd_abort
        )

    def _resolve(self, how, rng):
        d = self.dim
        if isinstance(how, np.ndarray):
            return how
        if how == "mixed":
            return maximally_mixed(d)
        if how == "random":
            return random_density_matrix(d, rng)
        if how == "random_pure":
            return random_pure_state(d, rng)
        if how.startswith("thermal:"):
            return thermal_state(d, float(how.split(":", 1)[1]))
        raise ValueError(f"{self.name}: unknown state recipe {how!r}")

    def initial_state(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return self._resolve(self.initial, rng or np.random.default_rng(self.cfg.seed))

    def estimator_initial(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return self._resolve(self.estimator_init, rng or np.random.default_rng(self.cfg.seed + 1))

    def observe(self, rho: np.ndarray) -> np.ndarray:
        """Observation vector(s) for policies, shape (B, n_obs)."""
        rho = np.asarray(rho)
        if self.observation == "moments":
            x, p = self.ops["x"], self.ops["p"]
            return np.stack(
                [expectation_real(x, rho), expectation_real(p, rho), expectation_real(x @ x, rho), expectation_real(p @ p, rho)],
                axis=-1,
            )
        if self.observation == "diagonal":
            return np.real(np.diagonal(rho, axis1=-2, axis2=-1))
        if self.observation == "matrix":
            iu = np.triu_indices(self.dim)
            m = rho[..., iu[0], iu[1]]
            return np.concatenate([m.real, m.imag], axis=-1)
        if self.observation == "bloch":
            return np.stack([expectation_real(s, rho) for s in (SIGMA_X, SIGMA_Y, SIGMA_Z)], axis=-1)
        raise ValueError(f"unknown observation {self.observation!r}")

    def leakage(self, rho: np.ndarray):
        """Population of the two highest Fock levels of the oscillator factor."""
        if self.fock_levels is None:
            return np.zeros(np.shape(rho)[:-2])
        n = self.fock_levels
        diag = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
        diag = diag.reshape(diag.shape[:-1] + (self.dim // n, n))
        return diag[..., -2:].sum(axis=(-1, -2))


# ---------------------------------------------------------------- builders


def _cfg(base: dict, overrides: dict) -> SmeConfig:
    keys = ("kappa", "eta", "dt", "seed", "scheme", "psd_abort")
    vals = {k: overrides.pop(k) for k in keys if k in overrides}
    merged = {**base, **vals}
    return SmeConfig(**merged)


def _take(overrides: dict, defaults: dict) -> dict:
    out = {}
    for k, v in defaults.items():
        out[k] = overrides.pop(k, v)
    return out


def _qubit(o):
    p = _take(o, dict(epsilon=0.1, delta=1.0))
    cfg = _cfg(dict(kappa=1.0, eta=1.0), o)
    H = 0.5 * p["epsilon"] * SIGMA_Z + 0.5 * p["delta"] * SIGMA_X
    # index 0 is the excited state (sigma_z = +1)
    return dict(
        space=HilbertSpace((2,)),
        H0=H,
        A=SIGMA_Z.copy(),
        cfg=cfg,
        initial=projector(UP),
        estimator_init="mixed",
        ops=dict(sigma_x=SIGMA_X, sigma_y=SIGMA_Y, sigma_z=SIGMA_Z),
        params=p,
        observation="bloch",
        horizon=15.0,
        estimation_budget=15.0,
    )


def _oscillator_ops(n):
    a, ad = ladder_operators(n)
    x, p = quadratures(n)
    return dict(a=a, adag=ad, x=x, p=p, n=ad @ a)


def _ground(H):
    w, v = np.linalg.eigh(H)
    return projector(v[:, 0])


def _qho(o):
    p = _take(o, dict(mass=1.0, omega=1.0, n_fock=30, alpha=1.5, estimator_nbar=1.0, gain_bound=5.0))
    cfg = _cfg(dict(kappa=0.05, eta=1.0), o)
    n = int(p["n_fock"])
    ops = _oscillator_ops(n)
    m, w = p["mass"], p["omega"]
    if m == 1.0 and w == 1.0:
        H = ops["n"] + 0.5 * np.eye(n)
    else:
        H = ops["p"] @ ops["p"] / (2 * m) + 0.5 * m * w**2 * ops["x"] @ ops["x"]
    return dict(
        space=HilbertSpace((n,)),
        H0=H,
        A=ops["x"],
        cfg=cfg,
        initial=projector(coherent_state(n, p["alpha"])),
        estimator_init=f"thermal:{p['estimator_nbar']}",
        target=_ground(H),
        control_names=("gain",),
        control_generators=(ops["p"],),
        control_bounds=(p["gain_bound"],),
        ops=ops,
        params=p,
        observation="moments",
        fock_levels=n,
        horizon=60.0,
        estimation_budget=20.0,
    )


def _quartic(o):
    p = _take(
        o,
        dict(mass=1 / np.pi, coupling=np.pi / 25, n_fock=40, alpha=1.2, estimator_nbar=1.0, control_bound=3.0),
    )
    cfg = _cfg(dict(kappa=0.1, eta=1.0), o)
    n = int(p["n_fock"])
    ops = _oscillator_ops(n)
    x, pp = ops["x"], ops["p"]
    H = pp @ pp / (2 * p["mass"]) + p["coupling"] * np.linalg.matrix_power(x, 4)
    H = 0.5 * (H + dag(H))
    return dict(
        space=HilbertSpace((n,)),
        H0=H,
        A=x,
        cfg=cfg,
        initial=projector(coherent_state(n, p["alpha"])),
        estimator_init=f"thermal:{p['estimator_nbar']}",
        target=_ground(H),
        control_names=("lambda",),
        control_generators=(pp,),
        control_bounds=(p["control_bound"],),
        ops=ops,
        params=p,
        observation="moments",
        fock_levels=n,
        horizon=10.0,
        estimation_budget=10.0,
    )


def _two_qubit(o):
    p = _take(o, dict(target="antisymmetric"))
    cfg = _cfg(dict(kappa=0.1, eta=0.5, dt=1e-2), o)
    sz1, sz2 = kron(SIGMA_Z, IDENTITY2), kron(IDENTITY2, SIGMA_Z)
    sy1, sy2 = kron(SIGMA_Y, IDENTITY2), kron(IDENTITY2, SIGMA_Y)
    Fz = sz1 + sz2
    rho_s, rho_a = bell_target("symmetric"), bell_target("antisymmetric")
    return dict(
        space=HilbertSpace((2, 2)),
        H0=np.zeros((4, 4), dtype=complex),
        A=Fz,
        cfg=cfg,
        initial="random_pure",
        estimator_init="mixed",
        target=rho_a if p["target"].startswith("anti") else rho_s,
        control_names=("u1", "u2"),
        control_generators=(sy1, sy2),
        control_bounds=(3.0, 3.0),
        ops=dict(F_z=Fz, sigma_y1=sy1, sigma_y2=sy2, sigma_z1=sz1, sigma_z2=sz2, rho_s=rho_s, rho_a=rho_a),
        params=p,
        observation="matrix",
        horizon=200.0,
        estimation_budget=50.0,
    )


def dispersive_hamiltonian(n, delta, chi, omega_c):
    """``(Delta + chi)/2 sz + chi sz a^dag a + Omega_c (a + a^dag)`` on qubit (x) cavity."""
    a, ad = ladder_operators(n)
    ic = np.eye(n)
    sz = SIGMA_Z  # |g><g| - |e><e| with g at index 0
    return 0.5 * (delta + chi) * kron(sz, ic) + chi * kron(sz, ad @ a) + omega_c * kron(IDENTITY2, a + ad)


def jaynes_cummings_hamiltonian(n, delta, g, omega_c):
    """``Delta/2 sz + g (s+ a + a^dag s-) + Omega_c (a + a^dag)``."""
    a, ad = ladder_operators(n)
    ic = np.eye(n)
    sm = SIGMA_MINUS  # |g><e|
    sp = sm.conj().T
    return 0.5 * delta * kron(SIGMA_Z, ic) + g * (kron(sp, a) + kron(sm, ad)) + omega_c * kron(IDENTITY2, a + ad)


def _cqed(o):
    p = _take(
        o,
        dict(g=1.0, detuning_over_g=10.0, omega_c=0.173, gamma=1e-4, gamma_phi=1e-4, n_fock=40, hamiltonian="dispersive", trigger=-0.9),
    )
    g = p["g"]
    kappa_default = 0.2 * g
    cfg_base = dict(kappa=kappa_default, eta=1.0, dt=0.05)
    delta = p["detuning_over_g"] * g
    chi = g**2 / delta
    p["chi"] = chi
    n = int(p["n_fock"])
    a, ad = ladder_operators(n)
    ic = np.eye(n)
    x = (a + ad) / np.sqrt(2)
    dissipators = ((kron(SIGMA_MINUS, ic), p["gamma"]), (kron(SIGMA_Z, ic), p["gamma_phi"] / 2))
    cfg = _cfg({**cfg_base, "extra_dissipators": dissipators}, o)
    if p["hamiltonian"] == "dispersive":
        H = dispersive_hamiltonian(n, delta, chi, p["omega_c"] * g)
    elif p["hamiltonian"] == "jc":
        H = jaynes_cummings_hamiltonian(n, delta, g, p["omega_c"] * g)
    else:
        raise ValueError("hamiltonian must be 'dispersive' or 'jc'")
    ground, excited = UP, DOWN
    vac = fock_state(n, 0)
    plus = (ground + excited) / np.sqrt(2)
    return dict(
        space=HilbertSpace((2, n)),
        H0=H,
        A=kron(IDENTITY2, x),
        cfg=cfg,
        initial=projector(np.kron(excited, vac)),
        estimator_init=projector(np.kron(plus, vac)),
        target=projector(np.kron(ground, vac)),
        ops=dict(
            sigma_z=kron(SIGMA_Z, ic),
            sigma_x=kron(SIGMA_X, ic),
            pi_pulse=kron(SIGMA_X, ic),
            x=kron(IDENTITY2, x),
            p=kron(IDENTITY2, 1j * (ad - a) / np.sqrt(2)),
            n=kron(IDENTITY2, ad @ a),
            ground_projector=kron(projector(ground), ic),
        ),
        params=p,
        observation="matrix",
        fock_levels=n,
        horizon=21.0,
        estimation_budget=20.0,
    )


def _fock_cavity(o):
    p = _take(o, dict(n_fock=15, channel_rate=0.1, drive_bound=1.0))
    cfg = _cfg(dict(kappa=p["channel_rate"], eta=1.0, dt=1e-2), o)
    n = int(p["n_fock"])
    ops = _oscillator_ops(n)
    a, ad = ops["a"], ops["adag"]
    # projectors are measured at rate kappa_n / 2 with unit efficiency
    channels = tuple((projector(fock_state(n, k)), p["channel_rate"] / 2, 1.0) for k in range(n))
    target = projector(fock_state(n, 1) + fock_state(n, 3))
    return dict(
        space=HilbertSpace((n,)),
        H0=np.zeros((n, n), dtype=complex),
        A=ops["n"],
        cfg=cfg,
        initial=projector(fock_state(n, 0)),
        estimator_init="mixed",
        target=target,
        control_names=("alpha_re", "alpha_im"),
        # i(alpha a^dag - alpha* a) = alpha_re i(a^dag - a) - alpha_im (a + a^dag)
        control_generators=(1j * (ad - a), -(a + ad)),
        control_bounds=(p["drive_bound"], p["drive_bound"]),
        ops=ops,
        params=p,
        observation="matrix",
        extra_channels=channels,
        fock_levels=n,
        horizon=20.0,
        estimation_budget=10.0,
    )


def double_well_potential(alpha: float, beta: float, n: int) -> np.ndarray:
    """``-alpha x^2 + beta x^4`` on the lowest ``n`` Fock states."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    x, _ = quadratures(n)
    x2 = x @ x
    V = -alpha * x2 + beta * x2 @ x2
    return 0.5 * (V + dag(V))


def _double_well(o):
    p = _take(o, dict(alpha=2.0, beta=0.25, n_fock=60, squeeze_bound=1.0))
    cfg = _cfg(dict(kappa=0.05, eta=1.0), o)
    n = int(p["n_fock"])
    ops = _oscillator_ops(n)
    a, ad = ops["a"], ops["adag"]
    H = ops["p"] @ ops["p"] / 2 + double_well_potential(p["alpha"], p["beta"], n)
    H = 0.5 * (H + dag(H))
    x2 = ops["x"] @ ops["x"]
    return dict(
        space=HilbertSpace((n,)),
        H0=H,
        A=0.5 * (x2 + dag(x2)),
        cfg=cfg,
        initial=projector(fock_state(n, 0)),
        estimator_init=projector(fock_state(n, 0)),
        target=_ground(H),
        control_names=("lambda",),
        control_generators=(1j * (ad @ ad - a @ a),),
        control_bounds=(p["squeeze_bound"],),
        ops={**ops, "parity": np.diag((-1.0) ** np.arange(n)).astype(complex)},
        params=p,
        observation="diagonal",
        fock_levels=n,
        horizon=10.0,
        estimation_budget=5.0,
    )


BUILDERS: dict[str, Callable[[dict], dict]] = {
    "qubit": _qubit,
    "qho": _qho,
    "quartic": _quartic,
    "two_qubit": _two_qubit,
    "cqed": _cqed,
    "fock_cavity": _fock_cavity,
    "double_well": _double_well,
}

STATE_KEYS = ("initial", "estimator_init")


def build(name: str, overrides: dict | None = None) -> ScenarioSpec:
    """Assemble a named scenario, applying parameter ``overrides``.

    Besides each scenario's physical parameters, ``kappa``, ``eta``, ``dt``,
    ``seed``, ``scheme``, ``psd_abort``, ``horizon``, ``estimation_budget``,
    ``initial``/``estimator_init`` (state recipes) and ``H0_file`` (a
    plain-text complex matrix replacing the Hamiltonian) are accepted.
    """
    if name not in BUILDERS:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(BUILDERS)}")
    o = dict(overrides or {})
    extra = {k: o.pop(k) for k in ("horizon", "estimation_budget") + STATE_KEYS if k in o}
    h0_file = o.pop("H0_file", None)
    fields_ = BUILDERS[name](o)
    if o:
        raise KeyError(f"scenario {name!r} has no parameter(s) {sorted(o)}")
    for k in STATE_KEYS:
        if k in extra:
            v = extra.pop(k)
            if isinstance(v, (list, tuple)):
                v = projector(np.asarray(v, dtype=complex))
            fields_[k] = v
    fields_.update(extra)
    if h0_file is not None:
        H = io.load_matrix(h0_file)
        if H.shape != fields_["H0"].shape:
            raise DimensionError(f"H0 from {h0_file} has shape {H.shape}, scenario needs {fields_['H0'].shape}")
        fields_["H0"] = H
    fields_["ops"] = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in fields_["ops"].items()}
    return ScenarioSpec(name=name, **fields_)


# ---------------------------------------------------------------- helpers on built scenarios

LEAKAGE_LIMIT = 1e-6


class LeakageError(RuntimeError):
    """Population reached the top of the Fock truncation."""


def leakage_guard(spec: ScenarioSpec, leakage, limit: float = LEAKAGE_LIMIT, action: str = "warn") -> float:
    """Check the largest top-two-level population seen in a run."""
    worst = float(np.max(leakage)) if np.size(leakage) else 0.0
    if worst > limit:
        msg = f"{spec.name}: population {worst:.2e} in the top two Fock levels exceeds {limit:g}; raise n_fock"
        if action == "raise":
            raise LeakageError(msg)
        if action == "warn":
            import warnings

            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return worst


def multi_channel_step(
    state: TrajectoryState, channels, H_total, dW, dt: float, dissipators=(), scheme: str = "kraus"
) -> TrajectoryState:
    """One step of an SME with an independent noise per monitored projector.

    ``channels`` is a list of ``(P_n, kappa_n)``; channel ``n`` contributes
    ``kappa_n/2 D[P_n] rho dt + sqrt(kappa_n/2) H[P_n] rho dW_n``.
    """
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if dW.shape != (len(channels),):
        raise ValueError(f"{len(channels)} channels need {len(channels)} noise increments, got shape {dW.shape}")
    chans = [(np.asarray(P, dtype=complex), 0.5 * rate, 1.0) for P, rate in channels]
    rho = measurement_update(state.rho, H_total, chans, dt, dW, dissipators, scheme)
    return TrajectoryState(rho, state.t + dt)


def simulate(spec: ScenarioSpec, n_steps: int, index: int = 0, stride: int = 1, rho0=None) -> tuple[list, MeasurementRecord]:
    """Uncontrolled trajectory of ``spec`` and its record, for any number of channels.

    Single-channel scenarios give exactly :func:`qfc.sme.run_trajectory`.
    """
    rho0 = spec.initial_state(np.random.default_rng(np.random.SeedSequence([spec.cfg.seed, index, 1]))) if rho0 is None else rho0
    if len(spec.channels) == 1:
        return run_trajectory(spec.H0, spec.A, rho0, spec.cfg, n_steps, stride=stride, index=index)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    cfg = spec.cfg
    n_ch = len(spec.channels)
    dWs = WienerStream(cfg.seed, index, cfg.dt, n_ch).take(n_steps)
    rho = np.asarray(rho0, dtype=complex)
    history = [TrajectoryState(rho, 0.0)]
    currents = np.empty((n_steps, n_ch))
    for k in range(n_steps):
        for j, (Aj, rate, eff) in enumerate(spec.channels):
            currents[k, j] = expectation_real(Aj, rho) + dWs[k, j] / (cfg.dt * np.sqrt(4 * rate * eff))
        rho = spec.step(rho, spec.H0, dWs[k])
        if (k + 1) % stride == 0:
            history.append(TrajectoryState(rho, (k + 1) * cfg.dt))
    return history, MeasurementRecord(cfg.dt * np.arange(n_steps), currents, cfg.kappa, cfg.eta, cfg.dt)
