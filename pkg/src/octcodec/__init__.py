"""Variable-rate multi-frequency learned image codec built on λ-modulated octave convolutions."""

from .bitstream import Container, Header, deserialize, serialize
from .codec import LoadedModel, compress, decompress, load_model
from .model import CodecConfig, CodecModel, named_config

__all__ = [
    "CodecConfig",
    "CodecModel",
    "Container",
    "Header",
    "LoadedModel",
    "compress",
    "decompress",
    "deserialize",
    "load_model",
    "named_config",
    "serialize",
]
