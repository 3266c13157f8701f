"""Low-bit KV-cache quantization with fused post-scaled kernels and score calibration."""

from .bitpack import PackedBuffer, pack, unpack
from .calibration import (
    CalibrationParams,
    CalibrationSample,
    ScoreRange,
    calibrated_scores,
    g_transform,
    grid_search,
    mse_report,
)
from .errors import ConfigurationError, DomainError, FormatError, KVQuantError
from .kernels import KernelConfig, naive_qk, naive_wv, qk_scores, wv_output
from .kvcache import HybridKVCache, build_cache
from .quantizer import ChannelStats, Mode, QuantizationConfig, QuantizedSegment, compute_stats, dequantize, quantize
from .tensor_core import DenseMatrix, Gaussian, HeavyTailed, OutlierChannels, WorkloadSpec, generate, read_tensor, write_tensor

__version__ = "0.1.0"
