"""Signal control and CAV routing for mixed-autonomy urban networks.

Store-and-forward network model with composition-dependent saturation
rates, a piecewise-linear MILP relaxation of the control problem, a
branch-and-bound solver, a receding-horizon controller, and a stochastic
macroscopic plant for closed-loop evaluation.
"""

from .network import (
    CostMatrix,
    Link,
    Network,
    NetworkError,
    Node,
    admissible_successors,
    build_grid,
    floyd_warshall,
)
from .dynamics import (
    FlowSet,
    HeadwayParams,
    Indexer,
    PlanStep,
    QueueState,
    TurningRates,
    autonomy_level,
    rollout,
    saturation_rate,
    step,
    transport_flows,
)
from .model import (
    MilpModel,
    Weights,
    build_milp,
    nonlinear_objective,
    partition,
)
from .solve import (
    MipSolution,
    SolveLimits,
    backend_solve,
    enumerate_oracle,
    solve_lp,
    solve_milp,
)
from .controller import (
    ControllerParams,
    Measurements,
    MpcController,
    activation_update,
    smooth_turning,
)
from .plant import NoiseConfig, PlantState, plant_step
from .metrics import approximation_error, mad, mpe, traffic_kpis
from .scenario import Scenario, bundled_scenario, load_scenario
from .runner import run_closed_loop, open_loop_solve, envelope_sweep

__version__ = "0.1.0"
