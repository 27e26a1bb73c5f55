"""Tools for studying and mitigating forgetting across multi-stage fine-tuning:
checkpoint merging, LoRA alpha discounting, experience replay manifests,
speech/text sequence formatting and a toy continual-learning simulator."""
from .tensor_store import Checkpoint, read_checkpoint, validate_compatible, write_checkpoint

__version__ = "0.1.0"

__all__ = ["Checkpoint", "read_checkpoint", "validate_compatible", "write_checkpoint", "__version__"]
