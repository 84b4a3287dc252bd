"""AC microgrid simulation and analysis toolkit.

Simulates an islanded AC microgrid (synchronous generators, inverter-based
sources, frequency-dependent loads) in closed loop with a distributed
primal-dual gradient controller that restores nominal frequency, enforces
voltage-magnitude limits, and shares active power according to a convex cost.
"""

from importlib import resources

from .network import (ConfigError, NetworkModel, NodeKind, incidence_matrix,
                      load_network, load_network_file, selectors,
                      to_config_text)
from .powerflow import (VoltageProfile, active_flow, excitation_map,
                        excitation_map_midpoint, loss_total, loss_vector,
                        reactive_flow, sin_loss_vector)
from .plant import (PlantInput, PlantState, algebraic_residual, costate,
                    dynamic_residual, hamiltonian, shifted_hamiltonian,
                    solve_algebraic)
from .controller import (Bounds, ControllerGains, ControllerState, CostSpec,
                         cost_and_gradient, freq_controller_rhs, project_dual,
                         volt_controller_rhs)
from .equilibrium import (DispatchProblem, KKTPoint, SolveOptions, SolverError,
                          consistent_equilibrium, kkt_residual, solve_op,
                          solve_op_sharp)

__version__ = "0.1.0"


def bundled_network_path() -> str:
    """Filesystem path of the bundled 12-node network config."""
    return str(resources.files("mgsim").joinpath("data/ieee12.cfg"))


def bundled_scenario_path() -> str:
    """Filesystem path of the bundled staircase scenario config."""
    return str(resources.files("mgsim").joinpath("data/ieee12_staircase.cfg"))
