"""Profile layer-wise gradient conflicts in shared-trunk multi-task networks,
branch the most conflicted layers into per-task copies, and benchmark the
result against gradient-combination baselines."""

from .balancers import (
    BalancerOutput,
    CagradConfig,
    combine_cagrad,
    combine_graddrop,
    combine_joint,
    combine_mgda,
    combine_pcgrad,
)
from .datasets import (
    ImageSet,
    MultiTaskDataset,
    compose_multi_overlay,
    gen_conflict_rig,
    load_idx,
    rig_trunk_spec,
)
from .layers import conv2d, dense, flatten, relu, softmax
from .network import (
    NetworkSpec,
    ParamStore,
    TaskGradients,
    backward_per_task,
    build_network,
    forward,
    param_counts,
)
from .profiler import (
    ConflictReport,
    LayerRanking,
    ProfilerConfig,
    accumulate,
    histogram_bins_default,
    pairwise_cosines,
    permutation_distance,
    profile_iteration,
    rank_layers,
    s_conflict_score,
)
from .rng import RngState
from .surgery import (
    DominanceResult,
    SurgeryPlan,
    apply_surgery,
    run_dominance_suite,
    select_layers,
    verify_one_step_dominance,
)
from .tensorops import cosine, finite_diff_grad
from .training import (
    MetricsReport,
    TrainConfig,
    evaluate,
    relative_improvement,
    run_surgery_pipeline,
    train,
)

__version__ = "0.1.0"
