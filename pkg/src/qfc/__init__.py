"""Continuous-measurement quantum state estimation and estimator-based feedback control.

Subpackages by concern:

``hilbert``      states, operators, fidelities and checks
``sme``          conditioned master equation, records, ensemble and Lindblad references
``estimator``    record-driven estimator and convergence time
``controllers``  feedback laws
``scenarios``    the physical systems and their defaults
``protocol``     batched estimate-then-control runs
``policy``       cross-entropy policy search
``cli``          the ``qfc`` command
"""

from .estimator import ConvergenceReport, MismatchSpec, run_estimation
from .protocol import ProtocolResult, run_protocol
from .scenarios import ScenarioSpec, build
from .sme import MeasurementRecord, SmeConfig, WienerStream, measurement_update, run_trajectory

__version__ = "0.1.0"

__all__ = [
    "ConvergenceReport",
    "MeasurementRecord",
    "MismatchSpec",
    "ProtocolResult",
    "ScenarioSpec",
    "SmeConfig",
    "WienerStream",
    "build",
    "measurement_update",
    "run_estimation",
    "run_protocol",
    "run_trajectory",
]
