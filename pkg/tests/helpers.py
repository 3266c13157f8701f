import numpy as np

from kvquant.quantizer import QuantizationConfig, dequantize, quantize_matrix


def quantized_heads(rng, h, n, d, bits, word_bits=8, scale=1.0):
    keys = (rng.normal(size=(h, n, d)) * scale).astype(np.float32)
    segs = [quantize_matrix(keys[i], QuantizationConfig(bits=bits, word_bits=word_bits)) for i in range(h)]
    deq = np.stack([np.asarray(dequantize(s)) for s in segs]) if n else np.zeros((h, 0, d), np.float32)
    return keys, segs, deq


def dot_scale(left, right):
    """Elementwise magnitude sum(|a_i| |b_i|) of the dot products left @ right."""
    return np.matmul(np.abs(np.asarray(left, np.float64)), np.abs(np.asarray(right, np.float64)))


def assert_dot_close(got, want, scale, rtol):
    """|got - want| <= rtol * scale elementwise, where scale bounds the summands."""
    got = np.asarray(got, np.float64)
    want = np.asarray(want, np.float64)
    bound = rtol * np.maximum(np.asarray(scale, np.float64), np.finfo(np.float32).tiny)
    excess = np.abs(got - want) - bound
    assert (excess <= 0).all(), f"max excess {excess.max():.3g} over tolerance"
