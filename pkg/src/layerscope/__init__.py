"""Layer-wise hidden-state analysis of a small BERT-style QA encoder."""
from .encoder import Encoder, EncodedInput, HiddenStateTrace, ModelConfig, forward_with_trace
from .synthgen import GeneratorConfig, Lexicon, generate, generate_splits
from .training import TrainConfig, fine_tune, grid_search

__all__ = [
    "Encoder", "EncodedInput", "HiddenStateTrace", "ModelConfig", "forward_with_trace",
    "GeneratorConfig", "Lexicon", "generate", "generate_splits",
    "TrainConfig", "fine_tune", "grid_search",
]
