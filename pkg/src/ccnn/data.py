"""Dataset ingestion and synthesis.

Three sources feed the trainer: IDX image/label pairs (the classic
big-endian container), GNT character files (record-oriented, one glyph
per record), and a built-in synthetic glyph generator for desk-scale
experiments. Every reader validates sizes before touching payload bytes
and raises structured errors from .errors on malformed input; no input,
however mangled, may crash the process or allocate without bound.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CorruptRecordError,
    CountMismatchError,
    DataError,
    DimensionError,
    ParameterError,
    TruncatedError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# allocation guard for record-oriented input: no single record may claim more
MAX_RECORD_BYTES = 64 * 2 ** 20


@dataclass
class Sample:
    """One grayscale glyph: image [1,H,W] float32 in [0,1] plus its label."""

    image: np.ndarray
    label: int
    source_id: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[0] != 1:
            raise ParameterError(f"sample image must be [1,H,W], got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ParameterError("sample pixels must lie in [0,1]")
        if self.label < 0:
            raise ParameterError("sample label must be non-negative")
        self.image = img


# --------------------------------------------------------------------------
# IDX


def _idx_header(data, path, n_dims, expected_magic):
    header = 4 * (1 + n_dims)
    if len(data) < header:
        raise TruncatedError(f"{path}: header needs {header} bytes, file has {len(data)}")
    fields = struct.unpack(f">{1 + n_dims}I", data[:header])
    if fields[0] != expected_magic:
        raise BadMagicError(
            f"{path}: magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}"
        )
    return fields[1:], header


def read_idx(images_path, labels_path):
    """Read an IDX image/label file pair into a list of Samples.

    Pixels are scaled to [0,1] by /255. The two files must agree on the
    sample count; payload lengths are checked exactly before any array
    is built.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_data = images_path.read_bytes()
    (count, rows, cols), off = _idx_header(img_data, images_path, 3, IDX_IMAGES_MAGIC)
    expected = off + count * rows * cols
    if len(img_data) != expected:
        raise TruncatedError(
            f"{images_path}: payload is {len(img_data) - off} bytes, "
            f"header promises {count}x{rows}x{cols}"
        )
    lbl_data = labels_path.read_bytes()
    (lbl_count,), lbl_off = _idx_header(lbl_data, labels_path, 1, IDX_LABELS_MAGIC)
    if len(lbl_data) != lbl_off + lbl_count:
        raise TruncatedError(
            f"{labels_path}: payload is {len(lbl_data) - lbl_off} bytes, "
            f"header promises {lbl_count}"
        )
    if count != lbl_count:
        raise CountMismatchError(
            f"{images_path.name} holds {count} images but "
            f"{labels_path.name} holds {lbl_count} labels"
        )
    pixels = np.frombuffer(img_data, dtype=np.uint8, offset=off)
    images = pixels.reshape(count, rows, cols).astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(lbl_data, dtype=np.uint8, offset=lbl_off)
    return [
        Sample(images[i][None], int(labels[i]), f"{images_path.name}#{i}")
        for i in range(count)
    ]


def write_idx(samples, images_path, labels_path):
    """Write Samples as an IDX pair; inverse of read_idx on byte level.

    Pixel floats are mapped back with round(p*255), which recovers the
    original byte exactly for anything read_idx produced.
    """
    if not samples:
        raise ParameterError("refusing to write an empty IDX pair")
    h, w = samples[0].image.shape[1:]
    for s in samples:
        if s.image.shape != (1, h, w):
            raise DimensionError(
                f"mixed image shapes: {s.image.shape} vs (1, {h}, {w})"
            )
        if s.label > 255:
            raise ParameterError("IDX labels are single bytes; label > 255")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, len(samples), h, w))
        for s in samples:
            q = np.rint(s.image[0].astype(np.float64) * 255.0)
            f.write(np.clip(q, 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(samples)))
        f.write(bytes(s.label for s in samples))


# --------------------------------------------------------------------------
# resampling


def bilinear_resize(image, out_h, out_w):
    """Resample a 2D image to (out_h, out_w) with bilinear interpolation.

    Source coordinates use half-pixel centers, src = (dst + 0.5)*scale - 0.5,
    clamped to the image rectangle, so edges replicate rather than darken.
    Computed in float64.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError("bilinear_resize wants a non-empty 2D image")
    if out_h < 1 or out_w < 1:
        raise ParameterError("output size must be positive")
    h, w = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def affine_sample(image, scale=1.0, angle_deg=0.0, tx=0.0, ty=0.0):
    """Scale/rotate/translate a 2D image about its center, zeros outside.

    The output grid is inverse-mapped into the source and sampled
    bilinearly; identity parameters return the input unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ParameterError("affine_sample wants a 2D image")
    if scale <= 0:
        raise ParameterError("scale must be positive")
    if scale == 1.0 and angle_deg == 0.0 and tx == 0.0 and ty == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = ys - cy - ty
    dx = xs - cx - tx
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    sx = (cos_a * dx + sin_a * dy) / scale + cx
    sy = (-sin_a * dx + cos_a * dy) / scale + cy
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros_like(img)
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + oy
        xx = x0 + ox
        wgt = (fy if oy else 1 - fy) * (fx if ox else 1 - fx)
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out[ok] += wgt[ok] * img[yy[ok], xx[ok]]
    return out


# --------------------------------------------------------------------------
# GNT


def read_gnt(path, class_map, input_size=64, counters=None):
    """Read a GNT character file into Samples.

    Each record is: u32 LE record size, 2 tag bytes, u16 LE width, u16 LE
    height, then width*height bitmap bytes with 0 = ink on 255 =
    background. Bitmaps are inverted to ink=high, padded to a centered
    square with background, and bilinearly resized to input_size.

    class_map keys are the two tag bytes as four lowercase hex digits
    (e.g. "b0a1"); records whose tag is missing from the map are skipped
    and tallied under counters["skipped"] when a dict is passed.
    """
    path = Path(path)
    data = path.read_bytes()
    samples = []
    off = 0
    idx = 0
    while off < len(data):
        if off + 4 > len(data):
            raise TruncatedError(f"{path}: dangling record header", offset=off)
        (record_size,) = struct.unpack_from("<I", data, off)
        if record_size < 10 or record_size > MAX_RECORD_BYTES:
            raise CorruptRecordError(
                f"{path}: record size {record_size} out of range", offset=off
            )
        if off + record_size > len(data):
            raise TruncatedError(
                f"{path}: record claims {record_size} bytes, "
                f"{len(data) - off} remain",
                offset=off,
            )
        tag = data[off + 4 : off + 6]
        width, height = struct.unpack_from("<2H", data, off + 6)
        if width < 1 or height < 1 or record_size != 10 + width * height:
            raise CorruptRecordError(
                f"{path}: record size {record_size} does not match "
                f"{width}x{height} bitmap",
                offset=off,
            )
        label = class_map.get(tag.hex())
        if label is None:
            if counters is not None:
                counters["skipped"] = counters.get("skipped", 0) + 1
        else:
            raw = np.frombuffer(
                data, dtype=np.uint8, count=width * height, offset=off + 10
            ).reshape(height, width)
            ink = (255.0 - raw.astype(np.float64)) / 255.0
            side = max(width, height)
            square = np.zeros((side, side))
            top = (side - height) // 2
            left = (side - width) // 2
            square[top : top + height, left : left + width] = ink
            img = bilinear_resize(square, input_size, input_size)
            samples.append(
                Sample(
                    np.clip(img, 0.0, 1.0).astype(np.float32)[None],
                    int(label),
                    f"{path.name}#{idx}",
                )
            )
        off += record_size
        idx += 1
    return samples


# --------------------------------------------------------------------------
# synthetic glyphs

_SEGMENTS = (
    (slice(8, 16), slice(14, 50)),   # top bar
    (slice(8, 36), slice(48, 56)),   # upper right
    (slice(28, 56), slice(48, 56)),  # lower right
    (slice(48, 56), slice(14, 50)),  # bottom bar
    (slice(28, 56), slice(8, 16)),   # lower left
    (slice(8, 36), slice(8, 16)),    # upper left
    (slice(28, 36), slice(14, 50)),  # middle bar
)

GLYPH_ALPHABET_SIZE = 64


def glyph_template(class_index, size=64):
    """Deterministic stroke pattern for one class: segments lit by bitmask."""
    if not 0 <= class_index < GLYPH_ALPHABET_SIZE:
        raise ParameterError(
            f"glyph alphabet holds {GLYPH_ALPHABET_SIZE} classes, "
            f"got index {class_index}"
        )
    canvas = np.zeros((64, 64))
    mask = class_index + 1
    for bit, region in enumerate(_SEGMENTS):
        if mask >> bit & 1:
            canvas[region] = 1.0
    if size != 64:
        canvas = bilinear_resize(canvas, size, size)
    return canvas


def synth_glyphs(num_classes, samples_per_class, noise=0.05, seed=0, jitter=1.0, size=64):
    """Generate a deterministic synthetic glyph dataset.

    Each class renders a distinct stroke template, then every sample gets
    random affine jitter (up to +-10% scale, +-10 degrees, +-4px shift,
    all scaled by ``jitter``) and Gaussian pixel noise. Same seed, same
    bytes. Samples come back class-major.
    """
    if not 1 <= num_classes <= GLYPH_ALPHABET_SIZE:
        raise ParameterError(
            f"num_classes must be in 1..{GLYPH_ALPHABET_SIZE}, got {num_classes}"
        )
    if samples_per_class < 1:
        raise ParameterError("samples_per_class must be positive")
    if noise < 0 or jitter < 0:
        raise ParameterError("noise and jitter cannot be negative")
    rng = np.random.default_rng(seed)
    templates = [glyph_template(c, size) for c in range(num_classes)]
    samples = []
    for cls in range(num_classes):
        for i in range(samples_per_class):
            scale = 1.0 + rng.uniform(-0.1, 0.1) * jitter
            angle = rng.uniform(-10.0, 10.0) * jitter
            tx = rng.uniform(-4.0, 4.0) * jitter
            ty = rng.uniform(-4.0, 4.0) * jitter
            img = affine_sample(templates[cls], scale, angle, tx, ty)
            if noise > 0:
                img = img + rng.normal(0.0, noise, img.shape)
            img = np.clip(img, 0.0, 1.0)
            samples.append(
                Sample(img.astype(np.float32)[None], cls, f"synth:{cls}:{i}")
            )
    return samples


# --------------------------------------------------------------------------
# dataset plumbing


def stratified_split(samples, eval_fraction, seed=0):
    """Shuffle and split per class so both halves see every label."""
    if not 0 < eval_fraction < 1:
        raise ParameterError("eval_fraction must be in (0,1)")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        n_eval = max(1, int(round(eval_fraction * len(group))))
        if n_eval >= len(group):
            raise ParameterError(
                f"class {label} has {len(group)} samples, too few to split"
            )
        held += [group[j] for j in order[:n_eval]]
        train += [group[j] for j in order[n_eval:]]
    return train, held


def to_arrays(samples):
    """Stack a sample list into (images [B,1,H,W] float32, labels [B] int64)."""
    if not samples:
        raise ParameterError("empty sample list")
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def batches(x, y, batch_size, rng=None):
    """Yield (xb, yb) slices; shuffled when an rng is given."""
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    n = x.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        pick = order[start : start + batch_size]
        yield x[pick], y[pick]


def load_dir(path, input_size=64):
    """Load a dataset directory.

    Two layouts are recognized: an IDX pair named images.idx/labels.idx,
    or one or more .gnt files next to a classes.json mapping tag hex
    digits to class indices.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    images, labels = path / "images.idx", path / "labels.idx"
    if images.exists() and labels.exists():
        return read_idx(images, labels)
    gnt_files = sorted(path.glob("*.gnt"))
    if gnt_files:
        class_file = path / "classes.json"
        if not class_file.exists():
            raise DataError(f"{path}: found .gnt files but no classes.json")
        class_map = json.loads(class_file.read_text())
        samples = []
        for f in gnt_files:
            samples += read_gnt(f, class_map, input_size=input_size)
        return samples
    raise DataError(f"{path}: no images.idx/labels.idx pair and no .gnt files")
