"""Domain-randomized synthetic seed imagery with contrastive pretraining
and linear-probe evaluation, in plain numpy.
"""

__version__ = "0.1.0"

from .augment import AugmentationPolicy, JitterStrengths, ViewPair, augment_once, make_views
from .config import RunConfig, default_run_config, load_run_config
from .contrastive import (
    Adam,
    FrameworkConfig,
    KeyQueue,
    PretrainResult,
    TrainConfig,
    byol_loss,
    cosine_similarity,
    ema_update,
    moco_info_nce,
    momentum_update,
    nt_xent_loss,
    pretrain,
    softmax_cross_entropy,
)
from .errors import (
    AllDiverged,
    AmbiguousForeground,
    BatchTooLarge,
    ConfigError,
    EmptyMatrix,
    EmptyQueue,
    InsufficientData,
    IoFailure,
    NoForegroundFound,
    NumericFailure,
    PlacementFailure,
    SeedclError,
    ShapeMismatch,
    UnknownHead,
    UnknownLabel,
    ZeroVector,
)
from .image import Image, load_png, save_png
from .metrics import (
    ClassificationReport,
    classification_report,
    color_histogram,
    confusion_matrix,
    histogram_rms_difference,
    macro_average,
    precision_recall_f1,
    render_report,
)
from .net import (
    EncoderConfig,
    HeadSpec,
    apply_head,
    default_head_specs,
    encode,
    gradient_check,
    init_params,
    strip_head_and_freeze,
)
from .params import ParamStore, load_checkpoint, save_checkpoint
from .probe import (
    LrFindResult,
    ProbeConfig,
    ProbeSplit,
    lr_find,
    predict_labels,
    split_labels,
    train_probe,
)
from .rng import derive_stream
from .synthgen import (
    Cutout,
    DatasetManifest,
    ManifestRecord,
    ThresholdConfig,
    compose_image,
    extract_cutouts,
    generate_dataset,
    generate_toy_cutouts,
    group_cutouts,
    otsu_threshold,
    read_manifest,
    write_manifest,
)
