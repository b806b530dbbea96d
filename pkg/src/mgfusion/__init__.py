"""Multi-granularity early/late fusion of speech and text embeddings for emotion recognition."""

from .diffcore import Module, Parameter, Tensor, check_gradients
from .granularity import (
    AlignmentTiers,
    LayeredEmbedding,
    LayerMixer,
    Segment,
    mix_layers,
    parse_alignment,
    pool_segments,
    serialize_alignment,
    syllabify,
)
from .models import ModelSpec, Prediction, build_model, combine_scores, load_checkpoint, save_checkpoint
from .dataio import SynthConfig, generate_synthetic, load_dataset
from .training import TrainConfig, run_cv, train_model, unweighted_accuracy

__version__ = "0.1.0"
