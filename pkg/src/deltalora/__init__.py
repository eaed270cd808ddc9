"""Delta-LoRA and baselines on a small numpy transformer."""

from .adapters import AdapterLinear, DeltaSnapshot, adapter_backward, adapter_forward, delta_expansion, delta_product, merge
from .model import ModelConfig, TinyTransformer
from .optim import AdamWState, TrainConfig, adamw_step, lr_at
from .tasks import gen_teacher_student, load_corpus
from .trainer import RunResult, sweep, train

__version__ = "0.1.0"

__all__ = [
    "AdapterLinear",
    "AdamWState",
    "DeltaSnapshot",
    "ModelConfig",
    "RunResult",
    "TinyTransformer",
    "TrainConfig",
    "adamw_step",
    "adapter_backward",
    "adapter_forward",
    "delta_expansion",
    "delta_product",
    "gen_teacher_student",
    "load_corpus",
    "lr_at",
    "merge",
    "sweep",
    "train",
]
