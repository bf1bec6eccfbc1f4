"""packsim: parallel-connected lithium-ion module simulator and
heterogeneity-importance analysis toolkit."""

__version__ = "0.1.0"

from .params import (  # noqa: F401
    CellParameters,
    ConfigError,
    ModuleConfig,
    OcpTable,
    ProtocolPhase,
    ProtocolSpec,
    SamplingRanges,
    capacity_from_eps,
    default_cell,
    default_protocol,
    eps_from_capacity,
    load_config,
    reference_module_config,
    sample_module,
    save_config,
)
from .espm import (  # noqa: F401
    CellState,
    Discretization,
    VoltageBreakdown,
    cell_voltage,
    initial_cell_state,
    soc_of,
    step_cell,
)
from .thermal import ThermalNetwork, r_m_from_geometry, step_temperatures  # noqa: F401
from .aging import SeiState, initial_sei_state, step_sei  # noqa: F401
from .module_solver import (  # noqa: F401
    DEFAULT_PROFILE,
    FAST_PROFILE,
    SimProfile,
    SimTrace,
    SolverError,
    mse_current,
    mse_temperature,
    run_protocol,
    simulate_module,
    solve_branch_currents,
)
from .montecarlo import CampaignSpec, run_campaign  # noqa: F401
from .stats import (  # noqa: F401
    PredictorSet,
    RegressionModel,
    ResponseSet,
    Term,
    compute_predictors,
    compute_responses,
    fit_ols,
    pareto_report,
    relative_importance,
    stepwise_fit,
)
from .arrange import arrange_descending_capacity, compare_arrangements  # noqa: F401
