"""Event-driven model-based RL over marked temporal point processes."""

from .tpp import (
    CountingIncrement,
    EventSequence,
    HawkesParams,
    HawkesState,
    ThinningBoundError,
    hawkes_intensity,
    hawkes_intensity_fn,
    intervened_intensity_step,
    log_likelihood,
    mc_integral,
    read_jsonl,
    sde_intensity_trajectory,
    thinning_sample,
    write_jsonl,
)
from .nhpi import (
    NhpiConfig,
    NhpiModel,
    NhpiTrainConfig,
    NonFiniteLossError,
    encode_sequence,
    intensity_head,
    load_checkpoint,
    nhpi_nll,
    nhpi_thinning_sample,
    save_checkpoint,
    temporal_encoding,
    train_nhpi,
)
from .env import (
    EnvConfig,
    EnvStep,
    HawkesInterventionEnv,
    LearnedEnvAdapter,
    load_env_config,
    make_synthetic_task,
    save_env_config,
)
from .agent import (
    AgentNets,
    LatentState,
    SedrlAgent,
    TransitionTuple,
    gumbel_action,
    make_agent_nets,
    policy_improvement,
    polyak_update,
    q_update,
    reward_loss,
    smdp_value_target,
    transition_loss,
    v_update,
)
from .buffers import StepBuffer, TrajectoryBuffer
from .harness import (
    RunConfig,
    evaluate,
    export_plot_data,
    run_reference,
    run_sedrl,
    simulate_trajectories,
)

__version__ = "0.1.0"
