"""Multimodal medical image super-resolution with multi-head convolutional
attention, built on a minimal NumPy reverse-mode autodiff core."""

from .autodiff import (
    Graph,
    GradcheckReport,
    NumericError,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv_transpose2d,
    gradcheck,
    mul_elementwise,
    relu,
    sigmoid,
    split_channels,
    sub,
    sum_all,
)
from .attention import (
    AttentionConfig,
    ablation_variant,
    ablation_variant_names,
    export_attention,
    head_forward,
    mhca_forward,
    mmhca_forward,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CorruptCheckpointError,
    UnsupportedVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    DataError,
    DatasetManifest,
    load_manifest,
    make_lr,
    read_pgm,
    save_manifest,
    synth_dataset,
    write_pgm,
)
from .layers import LayerSpec, ParamSet, init_params, pixel_shuffle, pixel_unshuffle, resblock, upsampler
from .metrics import gaussian_window, psnr, psnr_from_mse, ssim
from .networks import ModelSpec, encode_branch, forward_multimodal, forward_with_attention, self_ensemble
from .resize import bicubic_resize, bicubic_weight_matrix, cubic_kernel
from .train import (
    Adam,
    MetricsReport,
    TrainConfig,
    TrainResult,
    evaluate_bicubic,
    evaluate_model,
    mae_loss,
    train_model,
)

__version__ = "0.1.0"
