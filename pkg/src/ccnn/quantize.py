"""Fixed-point uniform weight quantization with per-tensor symmetric scales.

Each tensor is stored as integer codes in [-(2^(b-1)-1), 2^(b-1)-1] plus one
positive float32 scale, chosen so the largest magnitude maps to the extreme
code. There is no zero point: zero stays exactly zero, which matters for
weights feeding post-relu activations.

Scales are always exactly representable in float32 and dequantization is
evaluated in float64, where code * scale is exact (a 15-bit integer times a
24-bit significand fits in 53 bits). Re-quantizing a dequantized tensor is
therefore a genuine fixed point: same codes, same scale, bit for bit.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import AccountingError, DataError, DimensionError, ParameterError

ALLOWED_BITS = (2, 4, 8, 16)

#: buckets a parameter can land in, by what the tensor does
BUCKETS = ("conv", "classifier", "gwap", "bn_float")


@dataclass
class QuantScheme:
    """Bit widths per parameter class. Batch-norm vectors stay float32."""

    conv_bits: int = 8
    classifier_bits: int = 4
    gwap_bits: int = 8
    bn_stats: str = "float32"

    def __post_init__(self):
        for name in ("conv_bits", "classifier_bits", "gwap_bits"):
            bits = getattr(self, name)
            if bits not in ALLOWED_BITS:
                raise ParameterError(
                    f"{name} must be one of {ALLOWED_BITS}, got {bits}"
                )
        if self.bn_stats != "float32":
            raise ParameterError("batch-norm statistics only support float32")

    def bits_for(self, bucket):
        """Bits for a bucket, or None when the bucket stays in float32."""
        if bucket == "conv":
            return self.conv_bits
        if bucket == "classifier":
            return self.classifier_bits
        if bucket == "gwap":
            return self.gwap_bits
        if bucket == "bn_float":
            return None
        raise AccountingError(f"unknown bucket {bucket!r}")


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    scale: np.float32
    bits: int
    shape: tuple

    def __post_init__(self):
        self.shape = tuple(self.shape)
        qmax = 2 ** (self.bits - 1) - 1
        if self.codes.size and int(np.abs(self.codes).max()) > qmax:
            raise ParameterError(f"codes exceed the {self.bits}-bit range")
        if not self.scale > 0:
            raise ParameterError("scale must be positive")

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1


def quantize_uniform(t, bits):
    """Symmetric per-tensor quantization to ``bits`` bits.

    scale = max|t| / (2^(bits-1) - 1); codes = round(t / scale). An all-zero
    tensor gets scale 1 by convention. Scales too small for float32 collapse
    to the same convention, since every element then rounds to code zero
    anyway.
    """
    t = np.asarray(t)
    if t.size == 0:
        raise DimensionError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(t)):
        raise DataError("cannot quantize non-finite values")
    if bits < 2:
        raise ParameterError(f"bits must be >= 2, got {bits}")
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(t)))
    scale = np.float32(amax / qmax)
    if scale == 0:
        scale = np.float32(1.0)
    codes = np.rint(t.astype(np.float64) / np.float64(scale))
    codes = np.clip(codes, -qmax, qmax).astype(np.int32)
    return QuantizedTensor(codes=codes, scale=scale, bits=bits, shape=t.shape)


def dequantize(q):
    """Exact code * scale, in float64, with the original shape."""
    return (q.codes.astype(np.float64) * np.float64(q.scale)).reshape(q.shape)


def bucket_for(name):
    """Map a parameter name to its storage bucket.

    Batch-norm vectors stay float, pooling weights and conv kernels carry
    their own widths, and everything in a classifier stack (hidden layer
    included) counts as classifier weights.
    """
    leaf = name.rsplit("/", 1)[-1]
    if leaf.startswith("bn_"):
        return "bn_float"
    if name.endswith("gwap/w"):
        return "gwap"
    parts = name.split("/")
    if "classifier" in parts or "hidden" in parts:
        return "classifier"
    if leaf == "w":
        return "conv"
    raise AccountingError(f"parameter {name!r} fits no quantization bucket")


def quantize_params(params, scheme):
    """Quantize a parameter store bucket by bucket.

    Returns an ordered dict name -> QuantizedTensor or float32 ndarray (for
    buckets the scheme keeps in float).
    """
    out = {}
    for name, arr in params.items():
        bits = None if scheme is None else scheme.bits_for(bucket_for(name))
        out[name] = arr if bits is None else quantize_uniform(arr, bits)
    return out


def dequantize_params(params, scheme, parameters_cls):
    """Round-trip a parameter store through quantization, back to float32."""
    deq = parameters_cls()
    for name, entry in quantize_params(params, scheme).items():
        if isinstance(entry, QuantizedTensor):
            deq.add(name, dequantize(entry).astype(np.float32))
        else:
            deq.add(name, entry.copy())
    return deq


def tensor_storage_bytes(count, bits):
    """Packed payload bytes for one tensor: codes plus its float32 scale."""
    if bits is None:
        return 4 * count
    return math.ceil(count * bits / 8) + 4


def quantized_storage(params, scheme):
    """Total payload bytes to store ``params`` under ``scheme``.

    Counts packed codes, one 4-byte scale per quantized tensor, and 4 bytes
    per float value kept unquantized. A scheme of None means no quantization
    at all: exactly 4 bytes per parameter. Codes pack per tensor, so a
    4-bit tensor with an odd element count rounds up to a whole byte.
    Container framing (names, shapes, checksums) is not included.
    """
    total = 0
    for name, arr in params.items():
        bits = None if scheme is None else scheme.bits_for(bucket_for(name))
        total += tensor_storage_bytes(int(arr.size), bits)
    return total
