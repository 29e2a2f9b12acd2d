"""Finite scalar quantization codec toolkit.

Quantizers, residual decomposition, the FSQB token container, perfect
reconstruction filterbanks, receptive-field and FFT-plan analysis, a small
forward-only transformer autoencoder, and objective metrics.
"""

from .bitstream import (
    CodebookHistogram,
    HuffmanTable,
    TokenStream,
    bps,
    huffman_bitrate,
    huffman_build,
    normalized_entropy,
    pack_stream,
    unpack_stream,
)
from .errors import FsqError, ParseError
from .filterbank import FilterbankSpec, forward, inverse, roundtrip_report
from .quantizer import (
    QuantizerSpec,
    level_positions,
    noisy_quantize,
    quantize,
    quantize_scalar,
    quantize_vector,
    token_index,
    token_to_values,
)
from .residual import ResidualSpec, residual_decompose, residual_reconstruct, superset_check

__version__ = "0.1.0"
