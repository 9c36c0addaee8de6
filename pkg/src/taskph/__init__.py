"""Task/null-space port-Hamiltonian modelling and IDA-PBC control of redundant manipulators."""

__version__ = "0.1.0"

from .control import IdaPbcController, IdaPbcParams, solve_ik
from .decomposition import decompose, kinetic_energy_split, split_force, split_velocity
from .model import ConstantInertiaModel, Link, PlanarChain, SerialChain
from .ph import AnalyticDerivatives, CanonicalState, FiniteDifferences, PhState, TaskSpacePH
from .sim import ForcePulse, Scenario, TorqueWindow, integrate, run_pulse_experiment
from .task import ChainPositionTask, ConstantTask, FunctionTask, PlanarPositionTask

__all__ = [
    "AnalyticDerivatives", "CanonicalState", "ChainPositionTask", "ConstantInertiaModel",
    "ConstantTask", "FiniteDifferences", "ForcePulse", "FunctionTask", "IdaPbcController",
    "IdaPbcParams", "Link", "PhState", "PlanarChain", "PlanarPositionTask", "Scenario",
    "SerialChain", "TaskSpacePH", "TorqueWindow", "decompose", "integrate",
    "kinetic_energy_split", "run_pulse_experiment", "solve_ik", "split_force", "split_velocity",
]
