"""Cross-modality embedding matching with gated style-modulation blocks.

A frozen source-domain embedding backbone is turned into a cross-modality
matcher by inserting small gated blocks that re-style intermediate feature
maps for the target modality only, trained with a contrastive objective on
paired-modality data.
"""

from .autodiff import (
    GraphReuseError,
    InstanceStats,
    NonFiniteError,
    Tensor,
    backward,
    conv2d_3x3,
    finite_diff_check,
    global_avg_pool,
    instance_stats,
    l2_normalize,
    linear,
    no_grad,
    normalize_scale_shift,
    relu,
)
from .backbone import (
    BackboneConfig,
    ModelAssembly,
    build_backbone,
    forward_embed,
    insert_caim,
    load_checkpoint,
    replicate_channels,
    save_checkpoint,
)
from .blocks import (
    AffinePair,
    CaimParams,
    InstanceNormConfig,
    adain,
    aim,
    caim_forward,
    estimate_affine,
    init_caim,
    instance_norm,
    stylizer_forward,
)
from .data import (
    DatasetBundle,
    Identity,
    ModalityTransform,
    SampleRecord,
    apply_modality,
    generate_identities,
    load_dataset,
    make_dataset,
    render_source,
    save_dataset,
)
from .estimator import CaimMatcher
from .metrics import (
    EvalResult,
    MetricsReport,
    ScoreSet,
    auc,
    eer,
    evaluate,
    rank1,
    score_pairs,
    vr_at_far,
)
from .training import (
    AdamState,
    DivergenceError,
    PairBatch,
    TrainConfig,
    adam_update,
    contrastive_loss,
    pretrain_backbone,
    sample_pairs,
    train_caim,
)

__version__ = "0.1.0"
