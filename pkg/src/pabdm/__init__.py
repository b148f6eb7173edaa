"""Block-diffusion sequence decoding engine.

Trains small block-masked transformers with confidence-gated suffix
supervision and decodes them by committing adaptive, left-contiguous
high-confidence prefixes instead of fixed whole blocks.
"""

from .batching import align_batch, batch_decode, bucket_prompts
from .decoding import (
    CommitDecision,
    DecodeTrace,
    RoundRecord,
    StrategyConfig,
    StrategyKind,
    commits_respect_threshold,
    decode,
    decode_block_level,
    decode_fixed_k,
    replay_oracle_from_trace,
    select_commit,
)
from .layout import (
    EOS_ID,
    MASK_ID,
    NUM_SPECIALS,
    PAD_ID,
    BlockLayout,
    NoisySequence,
    apply_block_noise,
    make_layout,
)
from .masks import (
    ConcatLayout,
    MaskKind,
    MaskSpec,
    block_bidirectional_mask,
    block_causal_mask,
    concat_train_mask,
    full_causal_mask,
    segmented_mask,
)
from .model import (
    CacheState,
    ModelConfig,
    TinyTransformer,
    encode_prompt,
    forward,
    forward_training,
    init_model,
    load_checkpoint,
    save_checkpoint,
    token_confidence,
)
from .oracle import (
    SCENARIO_KINDS,
    ScenarioSample,
    ScriptedOracle,
    TargetOracle,
    decay_profile,
    make_scenario_samples,
    synthetic_targets,
)
from .tasks import (
    TASKS,
    EvalReport,
    GrammarTask,
    edit_distance,
    encode_corpus,
    evaluate,
    generate_corpus,
    get_task,
)
from .training import (
    OBJECTIVES,
    SupervisionPlan,
    TrainingBatch,
    build_training_batch,
    full_suffix_loss,
    gate_supervision,
    gated_suffix_loss,
    random_drop_loss,
    sample_suffix_starts,
    train_model,
)

__all__ = [
    "EOS_ID",
    "MASK_ID",
    "NUM_SPECIALS",
    "PAD_ID",
    "BlockLayout",
    "NoisySequence",
    "apply_block_noise",
    "make_layout",
    "ConcatLayout",
    "MaskKind",
    "MaskSpec",
    "block_bidirectional_mask",
    "block_causal_mask",
    "concat_train_mask",
    "full_causal_mask",
    "segmented_mask",
    "CacheState",
    "ModelConfig",
    "TinyTransformer",
    "encode_prompt",
    "forward",
    "forward_training",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "token_confidence",
    "SCENARIO_KINDS",
    "ScenarioSample",
    "ScriptedOracle",
    "TargetOracle",
    "decay_profile",
    "make_scenario_samples",
    "synthetic_targets",
    "CommitDecision",
    "DecodeTrace",
    "RoundRecord",
    "StrategyConfig",
    "StrategyKind",
    "commits_respect_threshold",
    "decode",
    "decode_block_level",
    "decode_fixed_k",
    "replay_oracle_from_trace",
    "select_commit",
    "align_batch",
    "batch_decode",
    "bucket_prompts",
    "OBJECTIVES",
    "SupervisionPlan",
    "TrainingBatch",
    "build_training_batch",
    "full_suffix_loss",
    "gate_supervision",
    "gated_suffix_loss",
    "random_drop_loss",
    "sample_suffix_starts",
    "train_model",
    "TASKS",
    "EvalReport",
    "GrammarTask",
    "edit_distance",
    "encode_corpus",
    "evaluate",
    "generate_corpus",
    "get_task",
]
