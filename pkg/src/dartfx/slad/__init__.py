# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT

from .errors import (  # noqa: F401
    BindingError,
    ConfigurationError,
    DataError,
    DimensionError,
    NumericalError,
    ParameterError,
    SladError,
    UndefinedSimilarityError,
    UnsupportedSiteError,
    UsageError,
)
from .tensor import Tensor, backward, grad_check, no_grad, parameter  # noqa: F401
from .vit import DESK_DEEP_TEACHER, DESK_STUDENT, DESK_TEACHER, Encoder, EncoderConfig, encoder_forward  # noqa: F401
from .lora import LoraAdapter, SharedAdapterView, create_adapters, init_lora, make_shared_view  # noqa: F401
from .heads import DistillConfig, MlpHead, cross_entropy, kd_loss, kl_divergence, slad_loss  # noqa: F401
from .data import DatasetDescriptor, TaskData, load_image_folder, synth_dataset  # noqa: F401
from .training import (  # noqa: F401
    BlockMapping,
    OptimConfig,
    OptimState,
    RunMetrics,
    TaskModel,
    adamw_step,
    block_mapping,
    build_task_model,
    distill_two_step,
    prepare_slad,
    train_adapt,
    train_probing,
    train_slad,
)
from .cka import CkaMatrix, cka_matrix, delta_cka, linear_cka, mean_aligned_cka  # noqa: F401
from .pretrain import PretrainConfig, load_encoder, pretrain_pair, save_encoder  # noqa: F401
from .experiment import ExperimentConfig, load_config, report, run  # noqa: F401
