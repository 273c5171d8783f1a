"""In-context intensity estimation for marked temporal point processes.

Synthesize event sequences from a Hawkes-process prior, pretrain a small
transformer to read conditional intensities from a context of example
sequences, and evaluate zero-shot inference, finetuning, and forecasting.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    ExplosionError,
    IceppError,
    NumericalError,
    ShapeError,
)
from .hawkes import (
    BaseIntensitySpec,
    Event,
    EventSequence,
    HawkesInstance,
    KernelSpec,
    PriorConfig,
    ground_truth_intensity,
    intensity_upper_bound,
    sample_instance,
    total_intensity,
)
from .likelihood import (
    IntensityParams,
    SequenceNLL,
    eval_model_intensity,
    model_compensator,
    sequence_nll_ground_truth,
    sequence_nll_model,
)
from .model import (
    ContextBatch,
    HistoryEmbedding,
    ModelConfig,
    ModelWeights,
    decode_history,
    embed_sequence,
    encode_context,
    forward_nll,
    predict_intensity_params,
)
from .simulate import (
    SimulationConfig,
    simulate_dataset,
    simulate_from_estimate,
    simulate_sequence,
)
from .store import import_csv, read_dataset, write_dataset
from .tensor import GradientTape, Tensor
from .train import TrainConfig, TrainState, adam_step, finetune, pretrain

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
