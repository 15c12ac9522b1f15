"""RAViT: resolution-adaptive multi-branch vision transformer.

A small, self-contained library (float64 + numpy only) for coarse-to-fine
image classification with CLS-token handoff between branches, entropy-gated
early exit, exact analytic FLOP accounting, and deterministic desk-scale
training.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_dataset, parse_run_config
from .cost import (
    CostReport,
    cost_report,
    cumulative_flops,
    expected_flops,
    format_flops,
    mac_layer,
    mac_total,
    seq_len,
    sweep_grid,
)
from .data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    Dataset,
    Sample,
    augment,
    eval_samples,
    load_cifar10,
    synth_dataset,
    write_cifar_records,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    LayerParams,
    attention_layer,
    attention_maps,
    classify,
    embed,
    encode,
    init_encoder_params,
    patchify,
    unpatchify,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)
from .model import (
    EvalResult,
    ExitDistRow,
    ExitRecord,
    RavitConfig,
    RavitParams,
    confidence,
    evaluate,
    exit_distribution,
    forward_all_exits,
    halving_sides,
    infer,
    init_ravit_params,
    resize,
    write_exit_csv,
)
from .numerics import (
    MacCounter,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    concat_cols,
    concat_rows,
    cross_entropy,
    entropy_nats,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
    zeros,
)
from .rng import Rng
from .training import (
    EpochLog,
    OptimizerState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    total_loss,
    train,
    write_train_log,
)
