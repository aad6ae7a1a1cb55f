"""cardiolearn: ECG segmentation/classification with continual learning.

A numpy-backed library implementing a multi-resolution 1D convolutional
encoder with segmentation and classification decoders, trained through a
parameter-isolation continual-learning lifecycle (train, prune, retrain)
that guarantees bit-exact retention of earlier tasks.
"""

import os as _os

_threads = _os.environ.get("CARDIOLEARN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .config import (  # noqa: E402
    DEFAULT_CHANNEL_CHOICES, EncoderConfig, SequenceConfig, SparsityConfig,
    SynthSpec, TaskConfig, VariantSpec, load_sequence_config, sequence_from_dict,
)
from .continual import (  # noqa: E402
    ContinualEngine, SparsitySchedule, TaskRecord, effective_weights, scope_families,
)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import (  # noqa: E402
    EcgRecord, SynthConfig, TaskData, bandpass, build_task_data, load_csv,
    preprocess, rasterize_qrs, save_csv, split, synth_ecg, task_data_from_config,
    window_and_normalize,
)
from .errors import CapacityError, ConfigError, ContractError, ShapeError  # noqa: E402
from .network import Network, make_adapter  # noqa: E402
from .tensor import Parameter, Tensor  # noqa: E402
from .training import (  # noqa: E402
    Adam, MetricsReport, OptimConfig, SGD, adam_step, bce_loss, lr_at,
    macro_auc, qrs_match, seg_predictions, sgd_step, validate_report,
)

__version__ = "0.1.0"
