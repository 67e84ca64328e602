"""Volumetric CT classification: preprocessing to fixed-shape volumes, a
dual-task 3D residual network, and reflection-TTA/ensemble inference."""

__version__ = "0.1.0"

from .dataio import (
    AnnotationSet,
    RawVolume,
    ScanRecord,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_slice_stack,
    read_volume_file,
    scan_dataset,
    write_volume_file,
)
from .errors import ConfigError, Cov3dError, DataError, StateError, TrainingError
from .inference import ScanPrediction, ensemble, predict_volume, write_predictions
from .metrics import EvalReport, evaluate_presence, evaluate_task2, macro_f1
from .network import (
    HeadOutputs,
    NetworkConfig,
    adapt_first_conv,
    build_network,
    load_checkpoint,
    run_backward,
    run_forward,
    save_checkpoint,
)
from .objectives import (
    ClassWeights,
    LossConfig,
    Prediction,
    SmoothingParams,
    TargetSpec,
    class_weights,
    combined_loss,
    covid_loss,
    severity_loss_labeled,
    severity_loss_unlabeled,
    sigmoid,
    smooth_binary_target,
    smooth_severity_target,
    softmax,
)
from .resampler import (
    PRESETS,
    PreprocessedVolume,
    SizePreset,
    bicubic_resize_2d,
    cubic_resample_1d,
    preprocess_volume,
    preset_by_name,
)
from .trainer import (
    TrainConfig,
    TrainHistory,
    adam_step,
    fit,
    one_cycle,
    random_sagittal_reflect,
    sagittal_reflect,
    select_best,
)
