"""Trace-driven planner and simulator for expert-parallel MoE load balancing."""

from .costmodel import (
    CostEstimate,
    LoadVector,
    SmoothingConfig,
    comm_time,
    comp_time,
    compute_loads,
    lse,
    moe_time,
    smoothed_moe_time,
)
from .reorder import (
    AnnealConfig,
    AnnealState,
    ReorderPlan,
    SamplePlacement,
    anneal_reorder,
    anneal_sample_placement,
    apply_plan,
    incremental_swap_update,
    lpt_initial,
    static_plan,
)
from .replicate import (
    ReplicaConfig,
    ReplicaPlacement,
    ReplicationEntry,
    ReplicationPlan,
    SplitPlan,
    exact_milp_small,
    greedy_replicate,
    replica_memory,
    round_split,
    solve_token_split_lp,
)
from .routing import (
    ModelProfile,
    RoutingTrace,
    SampleTable,
    TraceFormatError,
    TraceGenSpec,
    aggregate_batch,
    generate_synthetic_trace,
    hot_expert_intersection,
    load_trace,
    save_trace,
    skewness,
)
from .sim import (
    POLICIES,
    PlanBundle,
    SimConfigs,
    SimReport,
    compare_report,
    evaluate_bundle,
    run_baseline,
)
from .topology import (
    ClusterTopology,
    HardwareProfile,
    TrafficClass,
    build_topology,
    classify_traffic,
)

__version__ = "0.1.0"
