"""Privacy-preserving smart-meter data toolkit for LV network simulation."""

from .allocate import AllocationConfig, Stage1Result, Stage2Result, allocation_pipeline, default_k, stage1_allocate, stage2_tune
from .anonymize import AssignmentSample, GroupExchange, anonymity_audit, build_groups, monte_carlo, sample_assignment
from .bench import KpiReport, StudySettings, compute_kpis, kpi_max_lnl, kpi_max_trl, kpi_min_vm, kpi_mse_vm, run_study
from .errors import ConvergenceError, DataFormatError, GridAnonError, InfeasibleError, TopologyError
from .features import (
    FeatureMatrix,
    ScenarioKind,
    ScenarioSpec,
    affinity_matrix,
    annual_energy,
    build_features,
    distance_matrix,
    max_power,
    zscore_normalize,
)
from .model import (
    Bus,
    Line,
    LoadCategory,
    LoadDatabase,
    LoadProfile,
    Network,
    TimeGrid,
    UnknownLoad,
    aggregate_multicustomer,
    read_network_json,
    read_profiles_csv,
    write_network_json,
    write_profiles_csv,
)
from .partition import (
    Partition,
    PartitionQuality,
    PartitionSpec,
    SimilarityGraph,
    ip_partition,
    laplacian,
    quality,
    rsgp,
    sgp_cut,
    sgp_partition,
)
from .powerflow import LoadAssignment, PowerFlowResult, solve_series, solve_timestep
from .synth import CategoryMix, SynthSpec, planner_view, synth_database, synth_reference

__version__ = "0.1.0"
