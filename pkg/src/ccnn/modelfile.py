"""Binary model container.

Layout, all multi-byte integers little-endian unless noted:

    magic   4 bytes  b"CCNN"
    version u16      currently 1
    u32 header length, then that many bytes of JSON:
        {"spec": <network spec dict>, "trained": bool}
    u32 record count, then per record:
        u16 name length + name bytes (utf-8)
        u8 encoding tag: 0 = float32, 1 = quantized
        u8 ndim, then ndim x u32 dims
        payload:
            float32:   count*4 bytes, little-endian
            quantized: u8 bits, f32 scale, then codes packed two's
                       complement at the stated width (2-bit: four per
                       byte, 4-bit: two per byte, low bits first;
                       8/16-bit: int8 / little-endian int16)
    u32 CRC-32 (zlib) of every preceding byte

A quantized payload after the bits byte is exactly the size
quantize.tensor_storage_bytes reports, so the on-disk file and the
analytic storage accounting differ only by framing.
"""

import io
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .architecture import Network, NetworkSpec, Parameters
from .errors import (
    BadMagicError,
    ChecksumError,
    EncodingTagError,
    TruncatedError,
    VersionMismatchError,
)
from .quantize import QuantizedTensor, bucket_for, dequantize, quantize_uniform

MAGIC = b"CCNN"
MODEL_VERSION = 1
_ENC_FLOAT = 0
_ENC_QUANT = 1


def _pack_codes(codes, bits):
    flat = np.asarray(codes, dtype=np.int64).ravel()
    if bits == 8:
        return flat.astype(np.int8).tobytes()
    if bits == 16:
        return flat.astype("<i2").tobytes()
    per = 8 // bits
    mask = (1 << bits) - 1
    u = (flat & mask).astype(np.uint8)
    pad = (-len(u)) % per
    if pad:
        u = np.concatenate([u, np.zeros(pad, np.uint8)])
    u = u.reshape(-1, per)
    out = np.zeros(u.shape[0], np.uint16)
    for j in range(per):
        out |= u[:, j].astype(np.uint16) << (bits * j)
    return out.astype(np.uint8).tobytes()


def _unpack_codes(buf, bits, count):
    if bits == 8:
        return np.frombuffer(buf, np.int8, count).astype(np.int32)
    if bits == 16:
        return np.frombuffer(buf, "<i2", count).astype(np.int32)
    per = 8 // bits
    mask = (1 << bits) - 1
    raw = np.frombuffer(buf, np.uint8)
    cols = [((raw >> (bits * j)) & mask) for j in range(per)]
    vals = np.stack(cols, axis=1).ravel()[:count].astype(np.int32)
    sign = 1 << (bits - 1)
    return np.where(vals >= sign, vals - (1 << bits), vals)


@dataclass
class ModelFile:
    """Parsed model container: spec plus named parameter entries.

    Entries are float32 arrays or QuantizedTensors keyed by parameter
    name, in file order.
    """

    spec: NetworkSpec
    entries: dict
    trained: bool = False
    version: int = MODEL_VERSION

    def to_network(self):
        """Materialize float32 parameters (dequantizing as needed)."""
        params = Parameters()
        for name, entry in self.entries.items():
            if isinstance(entry, QuantizedTensor):
                params.add(
                    name, dequantize(entry).astype(np.float32).reshape(entry.shape)
                )
            else:
                params.add(name, entry)
        return Network(self.spec, params, trained=self.trained)

    def encodings(self):
        """name -> "float32" or "q<bits>" for every entry."""
        return {
            name: f"q{e.bits}" if isinstance(e, QuantizedTensor) else "float32"
            for name, e in self.entries.items()
        }


def save_model(path, spec, params, scheme=None, trained=False):
    """Write spec + parameters; with a scheme, weights are quantized
    per bucket on the way out (batch-norm statistics stay float)."""
    spec.validate()
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<H", MODEL_VERSION))
    header = json.dumps(
        {"spec": spec.to_dict(), "trained": bool(trained)}, sort_keys=True
    ).encode()
    body.write(struct.pack("<I", len(header)))
    body.write(header)
    names = params.names()
    body.write(struct.pack("<I", len(names)))
    for name in names:
        tensor = params[name]
        bits = scheme.bits_for(bucket_for(name)) if scheme is not None else None
        encoded = name.encode()
        body.write(struct.pack("<H", len(encoded)))
        body.write(encoded)
        if bits is None:
            body.write(struct.pack("<BB", _ENC_FLOAT, tensor.ndim))
            body.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            body.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        else:
            q = quantize_uniform(tensor, bits)
            body.write(struct.pack("<BB", _ENC_QUANT, tensor.ndim))
            body.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            body.write(struct.pack("<B", bits))
            body.write(struct.pack("<f", float(q.scale)))
            body.write(_pack_codes(q.codes, bits))
    blob = body.getvalue()
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise TruncatedError(
                f"{self.path}: ran out of bytes reading {what}", offset=self.off
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_model(path):
    """Read a model container back; inverse of save_model."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a model file (magic {data[:4]!r})")
    if len(data) < len(MAGIC) + 2 + 4:
        raise TruncatedError(f"{path}: shorter than any valid model file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != MODEL_VERSION:
        raise VersionMismatchError(
            f"{path}: file version {version}, this reader understands {MODEL_VERSION}"
        )
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"{path}: checksum 0x{actual_crc:08x} does not match stored 0x{stored_crc:08x}"
        )
    r = _Reader(data[:-4], path)
    r.off = 6
    (header_len,) = r.unpack("<I", "header length")
    header = json.loads(r.take(header_len, "header json"))
    spec = NetworkSpec.from_dict(header["spec"])
    trained = bool(header.get("trained", False))
    (n_records,) = r.unpack("<I", "record count")
    entries = {}
    for _ in range(n_records):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        enc, ndim = r.unpack("<BB", "encoding/ndim")
        dims = r.unpack(f"<{ndim}I", "dims") if ndim else ()
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if enc == _ENC_FLOAT:
            raw = r.take(4 * count, f"{name} float payload")
            entries[name] = np.frombuffer(raw, "<f4", count).reshape(dims).copy()
        elif enc == _ENC_QUANT:
            (bits,) = r.unpack("<B", f"{name} bit width")
            if bits not in (2, 4, 8, 16):
                raise EncodingTagError(f"{path}: {name} claims {bits}-bit codes")
            (scale,) = r.unpack("<f", f"{name} scale")
            packed_len = (count * bits + 7) // 8
            packed = r.take(packed_len, f"{name} codes")
            codes = _unpack_codes(packed, bits, count).reshape(dims)
            entries[name] = QuantizedTensor(
                codes=codes, scale=np.float32(scale), bits=bits, shape=tuple(dims)
            )
        else:
            raise EncodingTagError(f"{path}: unknown encoding tag {enc} for {name}")
    if r.off != len(r.data):
        raise TruncatedError(
            f"{path}: {len(r.data) - r.off} unread bytes after last record",
            offset=r.off,
        )
    return ModelFile(spec=spec, entries=entries, trained=trained, version=version)
