"""Feedback laws that turn the estimator's state into control amplitudes.

Each law has a single-state function (``damping_feedback``,
``two_qubit_controls``, ``reset_controller``, ``parametric_policy``) and a
small batched wrapper used by :mod:`qfc.protocol`.  The wrappers map a stack
of estimator states ``(B, d, d)`` to control amplitudes ``(B, n_controls)``;
the scenario turns amplitudes into a Hamiltonian ``sum_j u_j G_j`` that is
added to both the true system and the estimator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hilbert import SIGMA_X, SIGMA_Y, IDENTITY2, dag, expectation_real, kron


class Region(enum.IntEnum):
    """Where ``Tr[rho rho_target]`` sits relative to the hysteresis band."""

    ABOVE_GAMMA = 0
    IN_BAND_FROM_ABOVE = 1
    IN_BAND_FROM_BELOW = 2
    BELOW_HALF_GAMMA = 3


@dataclass(frozen=True)
class HysteresisState:
    last_region: Region = Region.IN_BAND_FROM_BELOW


def next_region(previous: Region | np.ndarray, overlap, gamma: float):
    """Region after observing ``overlap``; works on scalars or arrays of codes."""
    previous = np.asarray(previous)
    overlap = np.asarray(overlap)
    came_from_above = (previous == Region.ABOVE_GAMMA) | (previous == Region.IN_BAND_FROM_ABOVE)
    band = np.where(came_from_above, Region.IN_BAND_FROM_ABOVE, Region.IN_BAND_FROM_BELOW)
    out = np.where(overlap >= gamma, Region.ABOVE_GAMMA, np.where(overlap <= gamma / 2, Region.BELOW_HALF_GAMMA, band))
    return Region(int(out)) if out.ndim == 0 else out


# ---------------------------------------------------------------- damping


def damping_feedback(rho_e: np.ndarray, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Feedback Hamiltonian ``-<x>_e p`` for damping an oscillator."""
    return -expectation_real(x, rho_e) * p


# ---------------------------------------------------------------- two qubits

SIGMA_Y1 = kron(SIGMA_Y, IDENTITY2)
SIGMA_Y2 = kron(IDENTITY2, SIGMA_Y)


def _commutator_overlap(sig: np.ndarray, rho: np.ndarray, target: np.ndarray):
    """``Tr[i [sig, rho] target]`` (real), batched over ``rho``."""
    comm = 1j * (sig @ rho - rho @ sig)
    return np.real(np.einsum("...ij,ji->...", comm, target))


def two_qubit_controls(
    rho_e: np.ndarray, target: str, gamma: float, hstate: HysteresisState, rho_target: np.ndarray | None = None
) -> tuple[float, float, HysteresisState]:
    """Switching law stabilising the symmetric or antisymmetric Bell state.

    Above ``gamma`` the overlap-gradient law is used, at or below ``gamma/2``
    the constant law ``(1, 0)``, and inside the band whichever was in force
    when the state entered it.
    """
    from .scenarios import bell_target

    if rho_e.shape != (4, 4):
        raise ValueError("two-qubit law needs a 4x4 state")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    rho_t = bell_target(target) if rho_target is None else rho_target
    sign = 1.0 if target == "antisymmetric" else -1.0
    ov = float(np.real(np.trace(rho_e @ rho_t)))
    region = next_region(hstate.last_region, ov, gamma)
    if region in (Region.ABOVE_GAMMA, Region.IN_BAND_FROM_ABOVE):
        u1 = 1.0 - float(_commutator_overlap(SIGMA_Y1, rho_e, rho_t))
        u2 = sign - float(_commutator_overlap(SIGMA_Y2, rho_e, rho_t))
    else:
        u1, u2 = 1.0, 0.0
    return u1, u2, HysteresisState(region)


# ---------------------------------------------------------------- reset


def reset_controller(rho_e: np.ndarray, sigma_z: np.ndarray, trigger: float = -0.9, pulse: np.ndarray | None = None):
    """Return the pi-pulse unitary when ``<sigma_z>_e < trigger``, else None."""
    if expectation_real(sigma_z, rho_e) < trigger:
        if pulse is None:
            pulse = kron(SIGMA_X, np.eye(rho_e.shape[0] // 2))
        return pulse
    return None


def apply_unitary(U: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return U @ rho @ dag(U)


# ---------------------------------------------------------------- parametric policy


def policy_shape(n_obs: int, n_controls: int) -> int:
    return n_controls * (n_obs + 1)


def parametric_policy(obs: np.ndarray, weights: np.ndarray, bounds) -> np.ndarray:
    """Affine map followed by ``tanh`` squashing: ``u = bound * tanh(W obs + b)``.

    ``weights`` is the flat vector ``[W | b]`` of shape
    ``n_controls * (n_obs + 1)`` (row-major, bias last in each row), or a
    batch of such vectors matching the leading axis of ``obs``.
    """
    obs = np.asarray(obs, dtype=float)
    bounds = np.atleast_1d(np.asarray(bounds, dtype=float))
    n_obs = obs.shape[-1]
    n_controls = len(bounds)
    weights = np.asarray(weights, dtype=float)
    if weights.shape[-1] != policy_shape(n_obs, n_controls):
        raise ValueError(
            f"weight vector of length {weights.shape[-1]} does not fit {n_obs} observations "
            f"and {n_controls} controls (need {policy_shape(n_obs, n_controls)})"
        )
    W = weights.reshape(weights.shape[:-1] + (n_controls, n_obs + 1))
    pre = np.einsum("...ij,...j->...i", W[..., :n_obs], obs) + W[..., n_obs]
    return bounds * np.tanh(pre)


# ---------------------------------------------------------------- batched laws


@dataclass
class FeedbackLaw:
    """Base class for batched feedback laws used by the closed-loop runner."""

    variant = "none"

    def reset(self, n_traj: int) -> None:
        pass

    def controls(self, rho_e: np.ndarray, spec, active: np.ndarray) -> np.ndarray:
        """Amplitudes ``(B, n_controls)``; only rows with ``active`` may be nonzero."""
        return np.zeros((rho_e.shape[0], len(spec.control_names)))

    def log(self) -> dict:
        return {}


@dataclass
class NoFeedback(FeedbackLaw):
    variant = "none"


@dataclass
class DampingLaw(FeedbackLaw):
    """``u = -gain <x>_e`` on the scenario's first control, whose generator is ``p``."""

    gain: float = 1.0
    variant = "damping"

    def controls(self, rho_e, spec, active):
        x = spec.ops["x"]
        u = -self.gain * expectation_real(x, rho_e)
        out = np.zeros((rho_e.shape[0], len(spec.control_names)))
        out[:, 0] = np.where(active, u, 0.0)
        return out


@dataclass
class TwoQubitLaw(FeedbackLaw):
    target: str = "antisymmetric"
    gamma: float = 0.2
    variant = "two_qubit"
    regions: np.ndarray = field(default=None, repr=False)
    transitions: list = field(default_factory=list, repr=False)
    _step: int = field(default=0, repr=False)

    def reset(self, n_traj):
        self.regions = np.full(n_traj, int(Region.IN_BAND_FROM_BELOW))
        self.transitions = []
        self._step = 0

    def controls(self, rho_e, spec, active):
        from .scenarios import bell_target

        rho_t = bell_target(self.target)
        sign = 1.0 if self.target == "antisymmetric" else -1.0
        ov = np.real(np.einsum("bij,ji->b", rho_e, rho_t))
        new = next_region(self.regions, ov, self.gamma)
        new = np.where(active, new, self.regions)
        changed = np.nonzero(new != self.regions)[0]
        for b in changed:
            self.transitions.append((self._step, int(b), int(self.regions[b]), int(new[b]), float(ov[b])))
        self.regions = np.asarray(new, dtype=int)
        self._step += 1
        law = (self.regions == Region.ABOVE_GAMMA) | (self.regions == Region.IN_BAND_FROM_ABOVE)
        u1 = np.where(law, 1.0 - _commutator_overlap(SIGMA_Y1, rho_e, rho_t), 1.0)
        u2 = np.where(law, sign - _commutator_overlap(SIGMA_Y2, rho_e, rho_t), 0.0)
        return np.where(active[:, None], np.stack([u1, u2], axis=1), 0.0)

    def log(self):
        return {"regions": self.regions.copy(), "transitions": list(self.transitions)}


@dataclass
class ResetLaw(FeedbackLaw):
    """One-shot pi pulse at the end of the estimation stage."""

    trigger: float = -0.9
    variant = "qubit_reset"

    def pulse_mask(self, rho_e, spec) -> np.ndarray:
        return expectation_real(spec.ops["sigma_z"], rho_e) < self.trigger


@dataclass
class PolicyLaw(FeedbackLaw):
    """Linear-tanh policy on the scenario's observation vector.

    ``weights`` may be one vector shared by all trajectories or one row per
    trajectory (used to evaluate a whole population in one batch).
    """

    weights: np.ndarray = None
    variant = "parametric_policy"

    def controls(self, rho_e, spec, active):
        obs = spec.observe(rho_e)
        u = parametric_policy(obs, self.weights, spec.control_bounds)
        return np.where(active[:, None], u, 0.0)


def make_law(variant: str, **params) -> FeedbackLaw:
    variants = {
        "none": NoFeedback,
        "damping": DampingLaw,
        "two_qubit": TwoQubitLaw,
        "two_qubit_sym": lambda **kw: TwoQubitLaw(target="symmetric", **kw),
        "two_qubit_asym": lambda **kw: TwoQubitLaw(target="antisymmetric", **kw),
        "qubit_reset": ResetLaw,
        "parametric_policy": PolicyLaw,
    }
    if variant not in variants:
        raise ValueError(f"unknown feedback law {variant!r}; choose from {sorted(variants)}")
    return variants[variant](**params)
