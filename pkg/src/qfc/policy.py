"""Cross-entropy search over linear-tanh feedback policies.

A policy maps the scenario's observation vector (moments, populations or
matrix entries of the estimator state) to bounded control amplitudes.  An
episode starts after the estimation stage has finished, i.e. with the
estimator on the true state, and its return is the time-mean fidelity of the
estimator state to the scenario's target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .controllers import PolicyLaw, policy_shape
from .hilbert import PositivityError
from .protocol import run_protocol


@dataclass(frozen=True)
class CemConfig:
    """Cross-entropy method settings.

    ``episode_steps=None`` uses the scenario's horizon.  Each member is
    scored on ``eval_seeds`` episodes; all members of a generation share
    the same noise realisations.
    """

    population: int = 16
    elite_fraction: float = 0.25
    generations: int = 20
    init_std: float = 1.0
    seed: int = 0
    episode_steps: int | None = None
    eval_seeds: int = 1
    std_floor: float = 1e-3
    delay_steps: int = 0

    def __post_init__(self):
        if self.population < 8:
            raise ValueError("population must be at least 8")
        if not 0 < self.elite_fraction <= 1:
            raise ValueError("elite_fraction must lie in (0, 1]")
        if self.n_elite < 2:
            raise ValueError("elite count must be at least 2; raise population or elite_fraction")
        if self.generations < 0 or self.eval_seeds < 1:
            raise ValueError("generations must be >= 0 and eval_seeds >= 1")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")

    @property
    def n_elite(self) -> int:
        return int(math.ceil(self.elite_fraction * self.population))


@dataclass
class EpisodeResult:
    weights: np.ndarray
    mean_fidelity: float
    final_fidelity: float
    seed: int
    aborted: bool = False


@dataclass
class TrainingResult:
    best_weights: np.ndarray
    best_fidelity: float
    curve: list = field(default_factory=list)  # (generation, mean_fidelity, best_fidelity)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def n_weights(scenario) -> int:
    n_obs = scenario.observe(np.eye(scenario.dim)[None] / scenario.dim).shape[-1]
    return policy_shape(n_obs, len(scenario.control_names))


def _horizon(scenario, episode_steps):
    return scenario.horizon if episode_steps is None else episode_steps * scenario.cfg.dt


def evaluate_population(
    weights: np.ndarray,
    scenario,
    episode_indices,
    episode_steps: int | None = None,
    delay_steps: int = 0,
    stride: int = 10,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score a stack of weight vectors on shared episodes.

    Returns ``(mean_fidelity, final_fidelity, aborted)``, each of shape
    ``(n_members,)``, averaged over ``episode_indices``.  A member whose
    integration aborts scores zero and is flagged.
    """
    if scenario.target is None:
        raise ValueError(f"scenario {scenario.name!r} has no target state")
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    P = len(weights)
    episode_indices = np.asarray(episode_indices, dtype=int)
    E = len(episode_indices)
    horizon = _horizon(scenario, episode_steps)
    try:
        res = run_protocol(
            scenario,
            horizon=horizon,
            stages="closed_loop_from_t0",
            law=PolicyLaw(np.repeat(weights, E, axis=0)),
            rho_e0="matched",
            delay_steps=delay_steps,
            stride=stride,
            indices=np.tile(episode_indices, P),
        )
    except PositivityError:
        if P == 1:
            return np.zeros(1), np.zeros(1), np.ones(1, dtype=bool)
        parts = [evaluate_population(w[None], scenario, episode_indices, episode_steps, delay_steps, stride) for w in weights]
        return tuple(np.concatenate(x) for x in zip(*parts))
    fid = res.series["fidelity_target_est"].reshape(len(res.times), P, E)
    return fid.mean(axis=(0, 2)), fid[-1].mean(axis=1), np.zeros(P, dtype=bool)


def evaluate_policy(
    weights, scenario, cfg: CemConfig | None = None, seed: int = 0, delay_steps: int | None = None
) -> EpisodeResult:
    """One closed-loop episode on noise stream ``seed``; deterministic per (weights, seed)."""
    cfg = cfg or CemConfig()
    delay = cfg.delay_steps if delay_steps is None else delay_steps
    mean, final, aborted = evaluate_population(np.asarray(weights)[None], scenario, [seed], cfg.episode_steps, delay)
    return EpisodeResult(np.asarray(weights, dtype=float), float(mean[0]), float(final[0]), int(seed), bool(aborted[0]))


def cem_train(scenario, cem: CemConfig, init_mean: np.ndarray | None = None, log=None) -> TrainingResult:
    """Fit policy weights by the cross-entropy method.

    Generation ``g`` samples from ``Normal(mean, std**2)`` with the stream
    ``(cem.seed, g)`` and evaluates every member on episodes
    ``g * eval_seeds + k``.  The elites' mean and standard deviation
    (floored at ``std_floor``) become the next sampling distribution.
    """
    nw = n_weights(scenario)
    mean = np.zeros(nw) if init_mean is None else np.asarray(init_mean, dtype=float).copy()
    if mean.shape != (nw,):
        raise ValueError(f"initial weights have length {mean.size}, policy needs {nw}")
    std = np.full(nw, cem.init_std)
    best_w, best_f = mean.copy(), -np.inf
    curve = []
    for g in range(cem.generations):
        rng = np.random.default_rng(np.random.SeedSequence([cem.seed, g]))
        pop = mean + std * rng.standard_normal((cem.population, nw))
        episodes = np.arange(g * cem.eval_seeds, (g + 1) * cem.eval_seeds)
        scores, _, _ = evaluate_population(pop, scenario, episodes, cem.episode_steps, cem.delay_steps)
        order = np.argsort(-scores, kind="stable")
        elites = pop[order[: cem.n_elite]]
        if scores[order[0]] > best_f:
            best_f, best_w = float(scores[order[0]]), pop[order[0]].copy()
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cem.std_floor)
        curve.append((g, float(scores.mean()), best_f))
        if log is not None:
            log(g, float(scores.mean()), best_f)
    if cem.generations == 0:
        best_f = float("nan")
    return TrainingResult(best_w, best_f, curve, mean, std)
