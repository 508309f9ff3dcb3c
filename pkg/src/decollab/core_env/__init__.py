"""Dec-POMDP environments over token sequences."""
from .base import (
    END,
    PAD,
    DecPOMDPEnv,
    EnvState,
    GlobalInfo,
    StepOutcome,
    TaskInstance,
    Vocab,
    content,
    validate_action,
)
from .coopcode import CoopCodeEnv
from .enumerate import Trajectory, action_space, count_bound, enumerate_trajectories
from .gridbuild import GridBuildEnv
from .micro import NoiseEnv, TableEnv
from .pairwrite import PairWriteEnv
from .rewards import (
    band_credit,
    coopcode_reward,
    gridbuild_reward,
    gridbuild_score,
    hazard_penalty,
    jaccard,
    pairwrite_reward,
    parse_grid,
)
from .tasks import (
    builtin_suite,
    coopcode_micro,
    load_tasks,
    make_env,
    noise_micro,
    save_tasks,
    table_micro,
    task_from_dict,
)
