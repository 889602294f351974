"""Dense operator and density-matrix primitives.

Operators are plain complex ``numpy`` arrays of shape ``(d, d)``. Most
functions also accept a leading batch axis, ``(..., d, d)``, so that an
ensemble of trajectories can be pushed through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PURITY_SLACK = 1e-9

IDENTITY2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# |0><1|, lowers index 1 to index 0
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)


class DimensionError(ValueError):
    """Raised when operator and state dimensions disagree."""


class PositivityError(ArithmeticError):
    """Raised when a state acquires an eigenvalue below the abort threshold."""


@dataclass(frozen=True)
class HilbertSpace:
    """Tensor-product space described by its ordered factor dimensions."""

    factor_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.factor_dims)
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"invalid factor dimensions {self.factor_dims!r}")
        object.__setattr__(self, "factor_dims", dims)

    @property
    def dim(self) -> int:
        return int(np.prod(self.factor_dims))

    def embed(self, op: np.ndarray, factor: int) -> np.ndarray:
        """Lift a single-factor operator to the full space."""
        if op.shape != (self.factor_dims[factor],) * 2:
            raise DimensionError(
                f"operator shape {op.shape} does not fit factor {factor} "
                f"of dimension {self.factor_dims[factor]}"
            )
        mats = [np.eye(d, dtype=complex) for d in self.factor_dims]
        mats[factor] = np.asarray(op, dtype=complex)
        return kron(*mats)


def kron(*ops: np.ndarray) -> np.ndarray:
    """Tensor product of square matrices, left to right."""
    for op in ops:
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise DimensionError(f"kron expects square matrices, got {op.shape}")
    return reduce(np.kron, ops)


def dag(op: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(op, -1, -2))


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def _check_dims(op: np.ndarray, rho: np.ndarray) -> None:
    if op.shape[-1] != rho.shape[-1] or op.shape[-2] != rho.shape[-2]:
        raise DimensionError(
            f"operator of shape {op.shape[-2:]} cannot act on state of shape {rho.shape[-2:]}"
        )


def expectation(op: np.ndarray, rho: np.ndarray) -> np.ndarray | complex:
    """Return ``Tr[op rho]``; batched over leading axes of ``rho``."""
    _check_dims(op, rho)
    # Tr[A rho] = sum_ij A_ij rho_ji
    val = np.einsum("...ij,...ji->...", op, rho)
    return val[()] if np.ndim(val) == 0 else val


def expectation_real(op: np.ndarray, rho: np.ndarray) -> np.ndarray | float:
    val = np.real(expectation(op, rho))
    return float(val) if np.ndim(val) == 0 else val


def purity(rho: np.ndarray) -> np.ndarray | float:
    val = np.real(np.einsum("...ij,...ji->...", rho, rho))
    return float(val) if np.ndim(val) == 0 else val


def hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dag(m))


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a Hermitian positive semi-definite matrix.

    Eigenvalues within round-off of zero are clipped before the root is
    taken; a clearly negative eigenvalue raises :class:`PositivityError`.
    """
    w, v = np.linalg.eigh(hermitize(m))
    scale = max(1.0, float(np.max(np.abs(w))))
    if np.min(w) < -1e-8 * scale:
        raise PositivityError(f"matrix is not positive semi-definite (min eigenvalue {np.min(w):.3e})")
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w[..., None, :]) @ dag(v)


def fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Uhlmann fidelity ``(Tr sqrt(sqrt(rho) sigma sqrt(rho)))**2``.

    When either argument is (numerically) pure this equals ``Tr[rho sigma]``
    and the cheaper overlap is used.
    """
    _check_dims(rho, sigma)
    if rho.ndim != 2:
        raise DimensionError("fidelity takes single states; use fidelity_batch for ensembles")
    if abs(purity(sigma) - 1.0) < 1e-12 or abs(purity(rho) - 1.0) < 1e-12:
        f = expectation_real(rho, sigma)
    else:
        s = sqrtm_psd(rho)
        ev = np.linalg.eigvalsh(hermitize(s @ sigma @ s))
        f = float(np.sum(np.sqrt(np.clip(ev, 0.0, None)))) ** 2
    return float(np.clip(f, 0.0, 1.0 + 1e-9))


def fidelity_batch(rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Uhlmann fidelity along a common leading batch axis (either may be unbatched)."""
    rho, sigma = np.broadcast_arrays(rho, sigma)
    if rho.ndim == 2:
        return np.asarray(fidelity(rho, sigma))
    f = np.real(np.einsum("...ij,...ji->...", rho, sigma))
    pure = (np.abs(purity(rho) - 1.0) < 1e-12) | (np.abs(purity(sigma) - 1.0) < 1e-12)
    if not pure.all():
        mixed = ~pure
        r, sg = rho[mixed], sigma[mixed]
        w, v = np.linalg.eigh(hermitize(r))
        s = (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ dag(v)
        ev = np.linalg.eigvalsh(hermitize(s @ sg @ s))
        f[mixed] = np.sum(np.sqrt(np.clip(ev, 0.0, None)), axis=-1) ** 2
    return np.clip(f, 0.0, 1.0 + 1e-9)


def overlap(rho: np.ndarray, target: np.ndarray) -> np.ndarray | float:
    """``Tr[rho target]``; the fidelity when ``target`` is pure."""
    return expectation_real(target, rho)


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(hermitize(rho - sigma))
    return 0.5 * float(np.sum(np.abs(ev)))


def ladder_operators(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Annihilation and creation operators on the lowest ``n`` Fock states."""
    if n < 2:
        raise ValueError("Fock truncation must be at least 2")
    a = np.diag(np.sqrt(np.arange(1, n, dtype=float)), k=1).astype(complex)
    return a, a.conj().T


def quadratures(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Position and momentum ``x = (a + a^dag)/sqrt2``, ``p = i(a^dag - a)/sqrt2``."""
    a, ad = ladder_operators(n)
    return (a + ad) / np.sqrt(2), 1j * (ad - a) / np.sqrt(2)


def fock_state(n: int, k: int) -> np.ndarray:
    psi = np.zeros(n, dtype=complex)
    psi[k] = 1.0
    return psi


def coherent_state(n: int, alpha: complex) -> np.ndarray:
    """Truncated coherent state, renormalised on the truncated space."""
    k = np.arange(n)
    logfact = np.cumsum(np.log(np.maximum(k, 1)))
    amp = np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * logfact) * np.power(complex(alpha), k)
    return amp / np.linalg.norm(amp)


def thermal_state(n: int, nbar: float) -> np.ndarray:
    if nbar <= 0:
        return projector(fock_state(n, 0))
    p = (nbar / (1 + nbar)) ** np.arange(n)
    return np.diag(p / p.sum()).astype(complex)


def projector(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def maximally_mixed(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=complex) / dim


def random_density_matrix(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Hilbert-Schmidt random state from a Ginibre matrix."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_pure_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    return projector(rng.normal(size=dim) + 1j * rng.normal(size=dim))


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return hermitize(g)


def density_violations(rho: np.ndarray, tol: float = HERMITIAN_TOL) -> list[str]:
    """List the density-matrix invariants that ``rho`` breaks (empty if valid)."""
    rho = np.asarray(rho)
    problems = []
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        return [f"not square: {rho.shape}"]
    if not np.all(np.isfinite(rho)):
        return ["non-finite entries"]
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    if herm > tol:
        problems.append(f"not Hermitian (max |rho - rho^dag| = {herm:.2e})")
    tr = np.trace(rho)
    if abs(tr - 1) > TRACE_TOL:
        problems.append(f"trace {tr:.12g} != 1")
    pur = purity(rho)
    d = rho.shape[0]
    if not (1.0 / d - PURITY_SLACK <= pur <= 1.0 + PURITY_SLACK):
        problems.append(f"purity {pur:.12g} outside [1/d, 1]")
    return problems


def is_density_matrix(rho: np.ndarray) -> bool:
    return not density_violations(rho)


def as_density_matrix(state: np.ndarray) -> np.ndarray:
    """Accept a ket or a density matrix and return a validated density matrix."""
    state = np.asarray(state, dtype=complex)
    rho = projector(state) if state.ndim == 1 else state
    problems = density_violations(rho)
    if problems:
        raise ValueError("invalid density matrix: " + "; ".join(problems))
    return rho


def psd_repair(rho: np.ndarray, abort_tol: float = 1e-8) -> np.ndarray:
    """Clip small negative eigenvalues to zero and restore unit trace.

    Eigenvalues below ``-abort_tol`` raise :class:`PositivityError`.
    """
    w, v = np.linalg.eigh(rho)
    wmin = np.min(w)
    if wmin < -abort_tol:
        raise PositivityError(f"eigenvalue {wmin:.3e} below -{abort_tol:g}; the step size is too large")
    if wmin >= 0:
        return rho
    w = np.clip(w, 0.0, None)
    out = (v * w[..., None, :]) @ dag(v)
    return out / np.real(np.trace(out, axis1=-2, axis2=-1))[..., None, None]


def parity_operator(n: int) -> np.ndarray:
    return np.diag((-1.0) ** np.arange(n)).astype(complex)


def top_level_population(rho: np.ndarray, levels: int = 2) -> np.ndarray | float:
    """Population in the highest ``levels`` Fock states (truncation leakage)."""
    diag = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
    val = diag[..., -levels:].sum(axis=-1)
    return float(val) if np.ndim(val) == 0 else val
