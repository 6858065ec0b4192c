"""FOFE: fixed-size ordinally-forgetting encoding and FOFE-based language models."""

from .core import (
    FofeCode,
    ForgettingFactor,
    ForgettingMatrix,
    PrefixCodes,
    TokenSequence,
    build_forgetting_matrix,
    decode,
    decode_many,
    encode,
    encode_batch,
    encode_embedded,
    encode_prefixes,
    encode_via_matrix,
)

__version__ = "0.1.0"
