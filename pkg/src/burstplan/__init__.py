"""burstplan: planning and simulation toolkit for burst-parallel DNN
training on shared GPU clusters."""

from .costs import (CostContext, CostModel, LayerCost, activation_transfer,
                    amplification, comm_time, make_context,
                    power_of_two_candidates, sync_time, transition_time)
from .errors import (BurstplanError, CurveDomainError, DeadlockError,
                     GraphFormatError, InfeasiblePlanError,
                     MissingProfileError, UnsupportedTopologyError)
from .graph import (BlockDecomposition, BranchJoin, CompGraph, Layer,
                    LayerProfile, NetworkProfile, SingleLayer, decompose,
                    load_graph, profile_lookup, save_graph)
from .planner import (PlanTables, TrainingPlan, backtrace, brute_force_plan,
                      load_plan, plan, reduce_multichain, save_plan,
                      search_linear)
from .scaling import (SampleEfficiencyCurve, ScalingEstimate, estimate,
                      iteration_time, load_curve, save_curve, speedup_curve)
from .simulator import (GpuSim, InterferenceTable, OpRecord, SimConfig,
                        SimMetrics, SimTrace, Timeline, compile_timeline,
                        default_interference, feedback_update, forced_plan,
                        pareto_sweep, run_two_phase, simulate)

__version__ = "0.1.0"
