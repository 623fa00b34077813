"""Simulation and analysis of the secular motion of a nanoparticle in a Paul trap.

Submodules: ``physics`` (closed-form damping, heating and noise formulas),
``dynamics`` (exact-transition Langevin integrator with feedback cooling),
``detection`` (APD and camera read-out models, profile fits), ``analysis``
(ring-down, ring-up, heating and pressure fits), ``spectral`` (PLL, Allan
deviation, PSD), ``scenario``/``cli`` (declarative runs and the command line)
and ``reproduction`` (comparison with the reference values).
"""

from .physics import (Environment, Estimate, InvalidInputError, ParticleSpec, Shape,
                      gas_damping_coefficient, gas_damping_rate, noise_budget,
                      quality_factor)
from .traces import FitError, FitResult, TimeTrace
from .dataio import ParseError, export_trace, import_trace
from .scenario import ConfigError, load_scenario, run_scenario
from .reproduction import reproduce_paper

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Environment", "Estimate", "FitError", "FitResult", "InvalidInputError",
    "ParseError", "ParticleSpec", "Shape", "TimeTrace", "export_trace",
    "gas_damping_coefficient", "gas_damping_rate", "import_trace", "load_scenario",
    "noise_budget", "quality_factor", "reproduce_paper", "run_scenario",
]
