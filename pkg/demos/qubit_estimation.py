"""Track a driven qubit from its measurement current alone.

A weakly measured qubit (sigma_z readout, transverse drive) is simulated
once.  The current it produces is then replayed into estimators that start
far from the truth, and we watch how quickly each one locks on.  A second
pass repeats this with a miscalibrated Hamiltonian to show how model error
sets a fidelity plateau instead of convergence.

Run with ``python demos/qubit_estimation.py``.
"""
import numpy as np

from qfc import scenarios
from qfc.estimator import MismatchSpec, run_estimation
from qfc.hilbert import random_density_matrix

spec = scenarios.build("qubit")
steps = int(10.0 / spec.cfg.dt)
hist, record = scenarios.simulate(spec, steps, index=0)
truth = [h.rho for h in hist]

rng = np.random.default_rng(1)
print("start   t_f     final F")
for k in range(5):
    rho_e0 = random_density_matrix(2, rng)
    _, rep = run_estimation(record, spec, rho_e0=rho_e0, truth=truth, stride=100)
    t_f = "never" if rep.t_f is None else f"{rep.t_f:.2f}"
    print(f"{k:5d}   {t_f:6s}  {rep.final_fidelity:.4f}")

# a wrong Hamiltonian keeps the estimate from settling on the truth
print("\nlambda  late-time mean F")
for lam in (1.0, 1.2, 1.5):
    _, rep = run_estimation(record, spec, mismatch=MismatchSpec(lam), truth=truth, stride=100)
    late = rep.fidelity[len(rep.fidelity) // 2:]
    print(f"{lam:6.2f}  {late.mean():.4f}")
