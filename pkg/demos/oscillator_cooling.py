"""Cool a harmonic oscillator with estimate-then-control feedback.

The oscillator starts in a coherent state and its position is measured
continuously.  For the first stretch the estimator only listens.  Once it
agrees with the truth (or the listening budget runs out) a damping force
proportional to the estimated momentum is switched on, and the mean
occupation falls toward the ground state.

Run with ``python demos/oscillator_cooling.py`` (a few seconds).
"""
import numpy as np

from qfc import scenarios
from qfc.controllers import DampingLaw
from qfc.protocol import run_protocol

spec = scenarios.build("qho")
n_traj = 8
res = run_protocol(spec, n_traj, law=DampingLaw(gain=1.0), stride=250, observables={"n": spec.ops["n"]})

n_mean = res.series["n"].mean(axis=1)
f_est = res.series["fidelity"].mean(axis=1)
print("   t    <n>     F(est, truth)")
for t, n, f in zip(res.times, n_mean, f_est):
    print(f"{t:5.1f}  {n:6.3f}  {f:.4f}")

print(f"\nswitch times: {np.round(res.t_switch, 2)}")
print(f"final-quarter <n> per run: {np.round(res.final_quarter_mean('n'), 3)}")
print(f"worst truncation leakage: {res.series['leakage'].max():.1e}")
