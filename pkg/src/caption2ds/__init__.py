"""Recurrent caption decoders with 2D (multi-channel map) latent states,
1D baselines, a synthetic spatial-captioning corpus and state-interpretation
tools."""

__version__ = "0.1.0"

from .cells import KINDS, CellConfig, count_parameters  # noqa: E402
from .decoder import DecodeTrace, DecoderModel, Intervention, generate  # noqa: E402
from .vocab import Vocabulary, build_vocabulary  # noqa: E402

__all__ = [
    "KINDS", "CellConfig", "count_parameters", "DecodeTrace", "DecoderModel",
    "Intervention", "generate", "Vocabulary", "build_vocabulary", "__version__",
]
