"""Module-level GRPO for multi-module token programs."""

from .envs import ConfigurationError, make_builtin_env
from .groups import (
    GroupItem,
    GroupKey,
    GrpoGroup,
    form_module_level_groups,
    pad_groups,
    select_k_diverse,
)
from .objective import (
    GroupLossReport,
    ObjectiveConfig,
    compute_advantages,
    group_objective,
    kl_penalty,
    token_ratio,
)
from .policy import MLPPolicy, PolicyBank, SnapshotSet, TablePolicy, snapshot_refresh
from .runtime import (
    DatasetExample,
    ModuleSpec,
    ProgramSpec,
    Trace,
    Trajectory,
    execute_program,
)
from .trainer import TeacherSpec, TrainConfig, better_together, sample_teacher_rollouts, train

__version__ = "0.1.0"
