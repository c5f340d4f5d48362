"""Unet-family segmentation at desk scale: build, train, prune, compare.

The package covers the full loop: a numpy-backed autodiff core
(:mod:`lunet.tensor`), declarative Unet/LUnet/scaled architectures with
channel surgery (:mod:`lunet.unet`), gradual structured pruning strategies
(:mod:`lunet.pruning`), ADAM training with Dice evaluation
(:mod:`lunet.training`), synthetic context-dependent datasets
(:mod:`lunet.data`), and a config-driven experiment CLI (:mod:`lunet.cli`).
"""

from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    TensorFileError,
    load_tensor,
    no_grad,
    save_tensor,
    set_default_dtype,
)
from .unet import (
    ArchSpec,
    ChannelId,
    CountResult,
    UnetModel,
    build,
    count,
    extract_spec,
    load_checkpoint,
    load_spec,
    make_spec,
    save_checkpoint,
    save_spec,
)
from .pruning import (
    CriterionReport,
    Exhausted,
    LastChannel,
    PruneConfig,
    PruneLog,
    compute_criterion,
    remove_channel,
    select_victim,
    stamp_loop,
    update_dropout,
    widest_schedule,
)
from .training import (
    Adam,
    AdamState,
    RunResult,
    TrainConfig,
    adam_step,
    aggregate,
    dice,
    evaluate,
    median_mad,
    train,
)
from .data import Dataset, DatasetError, SynthSpec, generate, load_dataset, save_dataset

__version__ = "0.1.0"
