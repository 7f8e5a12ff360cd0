"""Bit-packed sign tensors and binarized inference kernels.

A binarized network stores weights and activations as signs (+1/-1). Packing
64 signs per machine word turns the neuron pre-activation into an
XNOR + popcount reduction: for rows w and x of length n,

    popcount(XNOR(w, x)) == number of matching positions
    2 * popcount - n     == sum_i w_i * x_i   (the +-1 dot product)

A hidden neuron fires (+1) iff popcount >= T, an integer threshold learned
during training. The output layer emits the integer score
2 * popcount - n - T so that an argmax (hardmax) over classes is well
defined without any floating point.

Encoding conventions (fixed, they define the serialization format):
  * bit 1 <-> +1, bit 0 <-> -1; sign ties map to +1
  * 64-bit words, row-major, last dimension packed LSB-first
  * padding bits beyond the last dimension are always zero
  * convolution padding contributes -1 (bit 0)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

WORD_BITS = 64

MODEL_MAGIC = b"BNN1"
LAYER_KIND_LINEAR = 0
LAYER_KIND_CONV = 1

_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)

# Keeps temporary (rows x neurons) popcount buffers at a sane size.
_MATRIX_CHUNK_ROWS = 4096


def words_per_row(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def tail_mask(n_bits: int) -> np.uint64:
    """Mask selecting the valid bits of the last word of an n_bits row."""
    rem = n_bits % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


def _pack_bool_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) boolean array into (rows, words_per_row) uint64."""
    rows, n = bits.shape
    wpr = words_per_row(n)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    buf = np.zeros((rows, wpr * 8), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return buf.view("<u8").astype(np.uint64, copy=False)


def _unpack_bool_rows(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of _pack_bool_rows; returns a (rows, n_bits) boolean array."""
    rows = words.shape[0]
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    as_bytes = as_bytes.reshape(rows, -1)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[:, :n_bits].astype(bool)


class BitTensor:
    """Bit-packed sign tensor (bit 1 <-> +1, bit 0 <-> -1).

    `shape` is the logical sign-tensor shape; `words` holds
    prod(shape[:-1]) rows of ceil(shape[-1]/64) uint64 words each, row-major,
    LSB-first within each word. Padding bits past shape[-1] are zero.

    Instances are immutable by convention: kernels never write to `words`,
    so a tensor can be shared freely across parallel workers.
    """

    __slots__ = ("shape", "words")

    def __init__(self, shape: tuple[int, ...], words: np.ndarray, *, validate: bool = True):
        shape = tuple(int(d) for d in shape)
        if len(shape) == 0 or any(d <= 0 for d in shape):
            raise ValueError(f"invalid BitTensor shape {shape}")
        rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
        wpr = words_per_row(shape[-1])
        words = np.asarray(words, dtype=np.uint64)
        if words.size != rows * wpr:
            raise ValueError(
                f"need {rows * wpr} words for shape {shape}, got {words.size}"
            )
        words = words.reshape(rows, wpr)
        if validate:
            if shape[-1] % WORD_BITS != 0:
                pad = words[:, -1] & ~tail_mask(shape[-1])
                if np.any(pad != 0):
                    raise ValueError("padding bits beyond the last dimension must be zero")
        self.shape = shape
        self.words = words

    # -- construction ------------------------------------------------------

    @classmethod
    def from_signs(cls, values: np.ndarray) -> "BitTensor":
        """Pack an array of +1/-1 values (bit i set iff value i is +1)."""
        arr = np.asarray(values)
        if arr.ndim == 0:
            raise ValueError("cannot pack a scalar")
        if not np.all(np.abs(arr) == 1):
            raise ValueError("sign values must be +1 or -1")
        return cls.from_bool(arr > 0)

    @classmethod
    def from_bool(cls, bits: np.ndarray) -> "BitTensor":
        """Pack a boolean array (True <-> +1)."""
        arr = np.asarray(bits, dtype=bool)
        if arr.ndim == 0:
            raise ValueError("cannot pack a scalar")
        shape = arr.shape
        flat = arr.reshape(-1, shape[-1])
        return cls(shape, _pack_bool_rows(flat), validate=False)

    # -- properties --------------------------------------------------------

    @property
    def n_bits(self) -> int:
        """Logical bits per packed row (the last dimension size)."""
        return self.shape[-1]

    @property
    def n_rows(self) -> int:
        return self.words.shape[0]

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    @property
    def total_bits(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def tail_mask(self) -> np.uint64:
        return tail_mask(self.shape[-1])

    # -- conversions -------------------------------------------------------

    def unpack_bool(self) -> np.ndarray:
        return _unpack_bool_rows(self.words, self.n_bits).reshape(self.shape)

    def unpack(self) -> np.ndarray:
        """Unpack to an int8 array of +1/-1."""
        bits = self.unpack_bool()
        return np.where(bits, np.int8(1), np.int8(-1))

    def flatten(self) -> "BitTensor":
        """Repack as a 1-D tensor (padding is re-laid-out, values preserved)."""
        if len(self.shape) == 1:
            return self
        return BitTensor.from_bool(self.unpack_bool().reshape(-1))

    def copy(self) -> "BitTensor":
        return BitTensor(self.shape, self.words.copy(), validate=False)

    def mask_padding(self) -> "BitTensor":
        """Return a copy with padding bits forced back to zero."""
        words = self.words.copy()
        words[:, -1] &= self.tail_mask
        return BitTensor(self.shape, words, validate=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.words, other.words))

    def __hash__(self):  # mutable ndarray payload
        raise TypeError("BitTensor is unhashable")

    def __repr__(self) -> str:
        return f"BitTensor(shape={self.shape})"


def pack(signs) -> BitTensor:
    """Pack a vector (or array) of +1/-1 signs into a BitTensor."""
    return BitTensor.from_signs(np.asarray(signs))


# ---------------------------------------------------------------------------
# XNOR / popcount kernels
# ---------------------------------------------------------------------------


def _popcount_matrix(x_words: np.ndarray, w_words: np.ndarray, n_bits: int) -> np.ndarray:
    """XNOR-popcount of every x row against every w row.

    x_words: (N, wpr) uint64, w_words: (M, wpr) uint64 -> (N, M) int32 counts
    of matching bit positions among the first n_bits. The last word is masked,
    so stray padding bits cannot contribute.
    """
    n_rows, wpr = x_words.shape
    counts = np.zeros((n_rows, w_words.shape[0]), dtype=np.int32)
    mask = tail_mask(n_bits)
    buf = np.empty((n_rows, w_words.shape[0]), dtype=np.uint64)
    for k in range(wpr):
        np.bitwise_xor(x_words[:, k, None], w_words[None, :, k], out=buf)
        np.bitwise_not(buf, out=buf)
        if k == wpr - 1:
            np.bitwise_and(buf, mask, out=buf)
        counts += np.bitwise_count(buf)
    return counts


def xnor_popcount_row(w: BitTensor, x: BitTensor) -> int:
    """Count positions where two packed sign rows agree.

    Equals (s + n) / 2 where s is the +-1 dot product of the two rows.
    """
    if len(w.shape) != 1 or len(x.shape) != 1:
        raise ValueError("xnor_popcount_row expects 1-D packed rows")
    if w.n_bits != x.n_bits:
        raise ValueError(f"bit length mismatch: {w.n_bits} vs {x.n_bits}")
    return int(_popcount_matrix(x.words, w.words, w.n_bits)[0, 0])


# ---------------------------------------------------------------------------
# Layers and models
# ---------------------------------------------------------------------------


@dataclass
class BinarizedLinearLayer:
    """Fully connected binarized layer.

    weights: BitTensor [out_features, in_features]
    thresholds: int vector, length out_features (popcount-domain; may lie
        outside [0, in_features], which forces a constant output)
    is_output: when set the layer emits integer scores instead of sign bits
    """

    weights: BitTensor
    thresholds: np.ndarray
    is_output: bool = False

    def __post_init__(self):
        if len(self.weights.shape) != 2:
            raise ValueError("linear weights must be 2-D [out, in]")
        self.thresholds = np.asarray(self.thresholds)
        if not np.issubdtype(self.thresholds.dtype, np.integer):
            raise ValueError("thresholds must be integers")
        self.thresholds = self.thresholds.astype(np.int32)
        if self.thresholds.shape != (self.out_features,):
            raise ValueError(
                f"expected {self.out_features} thresholds, got shape {self.thresholds.shape}"
            )

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]


@dataclass
class BinarizedConvLayer:
    """2-D binarized convolution layer.

    weights: BitTensor [filters, in_channels, k_h, k_w]
    thresholds: int vector, length filters
    Padded positions contribute -1 bits.
    """

    weights: BitTensor
    thresholds: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if len(self.weights.shape) != 4:
            raise ValueError("conv weights must be 4-D [filters, in_ch, k_h, k_w]")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        self.thresholds = np.asarray(self.thresholds)
        if not np.issubdtype(self.thresholds.dtype, np.integer):
            raise ValueError("thresholds must be integers")
        self.thresholds = self.thresholds.astype(np.int32)
        if self.thresholds.shape != (self.filters,):
            raise ValueError(
                f"expected {self.filters} thresholds, got shape {self.thresholds.shape}"
            )

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


Layer = BinarizedLinearLayer | BinarizedConvLayer


@dataclass
class BnnModel:
    """Ordered stack of binarized layers; the last layer emits class scores."""

    layers: list[Layer]
    input_shape: tuple[int, ...] | None = None
    class_count: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        last = self.layers[-1]
        if not isinstance(last, BinarizedLinearLayer) or not last.is_output:
            raise ValueError("the last layer must be a linear output layer")
        for layer in self.layers[:-1]:
            if isinstance(layer, BinarizedLinearLayer) and layer.is_output:
                raise ValueError("only the last layer may be the output layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            # conv transitions depend on spatial dims, checked at forward time
            if isinstance(prev, BinarizedLinearLayer) and isinstance(nxt, BinarizedLinearLayer):
                if prev.out_features != nxt.in_features:
                    raise ValueError(
                        f"layer {i} emits {prev.out_features} bits but layer {i + 1} "
                        f"expects {nxt.in_features}"
                    )
        if self.class_count == 0:
            self.class_count = last.out_features
        elif self.class_count != last.out_features:
            raise ValueError("class_count disagrees with the output layer width")
        if self.input_shape is not None:
            self.input_shape = tuple(int(d) for d in self.input_shape)

    def copy(self) -> "BnnModel":
        layers: list[Layer] = []
        for layer in self.layers:
            if isinstance(layer, BinarizedLinearLayer):
                layers.append(
                    BinarizedLinearLayer(
                        layer.weights.copy(), layer.thresholds.copy(), layer.is_output
                    )
                )
            else:
                layers.append(
                    BinarizedConvLayer(
                        layer.weights.copy(),
                        layer.thresholds.copy(),
                        layer.stride,
                        layer.padding,
                    )
                )
        return BnnModel(layers, self.input_shape, self.class_count)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def linear_forward(layer: BinarizedLinearLayer, x: BitTensor):
    """Apply a binarized linear layer.

    x may be a single sample [in] (or any shape with in_features total bits)
    or a batch [N, in]. Hidden layers return a BitTensor of sign bits
    (bit j set iff popcount_j >= T_j); the output layer returns integer
    scores 2*popcount - n - T per neuron.
    """
    n = layer.in_features
    single = False
    if len(x.shape) == 1:
        if x.n_bits != n:
            raise ValueError(f"expected {n} input bits, got {x.n_bits}")
        single = True
    elif len(x.shape) == 2:
        if x.shape[1] != n:
            raise ValueError(f"expected inputs of {n} bits, got {x.shape[1]}")
    else:
        if x.total_bits != n:
            raise ValueError(f"cannot feed shape {x.shape} into {n}-input layer")
        x = x.flatten()
        single = True

    counts = np.empty((x.n_rows, layer.out_features), dtype=np.int32)
    for lo in range(0, x.n_rows, _MATRIX_CHUNK_ROWS):
        hi = min(lo + _MATRIX_CHUNK_ROWS, x.n_rows)
        counts[lo:hi] = _popcount_matrix(x.words[lo:hi], layer.weights.words, n)

    if layer.is_output:
        scores = 2 * counts.astype(np.int64) - n - layer.thresholds.astype(np.int64)
        return scores[0] if single else scores
    bits = counts >= layer.thresholds
    out = BitTensor.from_bool(bits)
    if single:
        return BitTensor((layer.out_features,), out.words, validate=False)
    return out


def conv_forward(layer: BinarizedConvLayer, x: BitTensor) -> BitTensor:
    """Apply a binarized 2-D convolution to a single [C, H, W] sample.

    Equivalent to gathering each receptive field into a row of
    C*k_h*k_w sign bits (padding supplying -1) and running the
    XNOR-popcount threshold kernel against the flattened filters.
    """
    if len(x.shape) != 3:
        raise ValueError("conv input must be [channels, height, width]")
    c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(f"expected {layer.in_channels} input channels, got {c}")
    kh, kw = layer.kernel_size
    stride, pad = layer.stride, layer.padding
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("kernel does not fit the (padded) input")

    dense = x.unpack_bool()
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=bool)  # pad = -1 bits
    padded[:, pad : pad + h, pad : pad + w] = dense

    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, h_out, w_out, kh, kw)
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c * kh * kw)

    n = c * kh * kw
    patch_words = _pack_bool_rows(patches)
    filt_bits = layer.weights.unpack_bool().reshape(layer.filters, n)
    filt_words = _pack_bool_rows(filt_bits)

    counts = _popcount_matrix(patch_words, filt_words, n)  # (positions, filters)
    bits = counts >= layer.thresholds  # broadcast over positions
    fmaps = bits.T.reshape(layer.filters, h_out, w_out)
    return BitTensor.from_bool(fmaps)


def model_scores(model: BnnModel, x: BitTensor) -> np.ndarray:
    """Run the full stack and return output-layer integer scores."""
    has_conv = any(isinstance(l, BinarizedConvLayer) for l in model.layers)
    if model.input_shape is not None and not has_conv:
        n_in = int(np.prod(model.input_shape, dtype=np.int64))
        if x.shape[-1] != n_in and x.total_bits != n_in:
            raise ValueError(
                f"input shape {x.shape} incompatible with model input {model.input_shape}"
            )
    act = x
    for layer in model.layers:
        if isinstance(layer, BinarizedLinearLayer):
            act = linear_forward(layer, act)
        else:
            act = conv_forward(layer, act)
    return act


def model_predict(model: BnnModel, x: BitTensor) -> int:
    """Predict the class of a single sample (ties -> lowest class index)."""
    scores = model_scores(model, x)
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError("model_predict expects a single sample")
    return int(np.argmax(scores))


def model_predict_batch(model: BnnModel, x: BitTensor) -> np.ndarray:
    """Predict classes for a [N, in] batch (linear-only models)."""
    scores = model_scores(model, x)
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[None, :]
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# Serialization (format BNN1, little-endian)
# ---------------------------------------------------------------------------
#
#   magic "BNN1" | u32 layer_count
#   per layer:
#     u8 kind (0 linear, 1 conv)
#     linear: u32 out, u32 in          conv: u32 filters, in_ch, k_h, k_w, stride, padding
#     u8 is_output
#     i32 thresholds [out | filters]
#     u64 weight words (row-major BitTensor layout)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated model file while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def expect_eof(self):
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after model payload",
                self.offset,
            )


def dump_model(model: BnnModel) -> bytes:
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        if isinstance(layer, BinarizedLinearLayer):
            out += struct.pack("<B", LAYER_KIND_LINEAR)
            out += struct.pack("<II", layer.out_features, layer.in_features)
            out += struct.pack("<B", 1 if layer.is_output else 0)
        else:
            out += struct.pack("<B", LAYER_KIND_CONV)
            kh, kw = layer.kernel_size
            out += struct.pack(
                "<IIIIII", layer.filters, layer.in_channels, kh, kw, layer.stride, layer.padding
            )
            out += struct.pack("<B", 0)
        thr = layer.thresholds.astype(np.int64)
        if np.any(thr > np.iinfo(np.int32).max) or np.any(thr < np.iinfo(np.int32).min):
            raise ValueError("threshold out of i32 range")
        out += thr.astype("<i4").tobytes()
        out += layer.weights.words.astype("<u8").tobytes()
    return bytes(out)


def load_model_bytes(data: bytes) -> BnnModel:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    (layer_count,) = r.unpack("<I", "layer count")
    if layer_count == 0:
        raise FormatError("model has zero layers", r.offset)
    layers: list[Layer] = []
    for i in range(layer_count):
        (kind,) = r.unpack("<B", f"layer {i} kind")
        if kind == LAYER_KIND_LINEAR:
            out_f, in_f = r.unpack("<II", f"layer {i} dims")
            if out_f == 0 or in_f == 0:
                raise FormatError(f"layer {i} has zero dimension", r.offset)
            (is_output,) = r.unpack("<B", f"layer {i} is_output")
            thr = r.array("<i4", out_f, f"layer {i} thresholds")
            n_words = out_f * words_per_row(in_f)
            words = r.array("<u8", n_words, f"layer {i} weights")
            try:
                weights = BitTensor((out_f, in_f), words)
            except ValueError as exc:
                raise FormatError(f"layer {i}: {exc}", r.offset) from exc
            layers.append(BinarizedLinearLayer(weights, thr, bool(is_output)))
        elif kind == LAYER_KIND_CONV:
            filters, in_ch, kh, kw, stride, padding = r.unpack("<IIIIII", f"layer {i} dims")
            if 0 in (filters, in_ch, kh, kw, stride):
                raise FormatError(f"layer {i} has zero dimension", r.offset)
            (is_output,) = r.unpack("<B", f"layer {i} is_output")
            if is_output:
                raise FormatError(f"layer {i}: conv layers cannot be the output", r.offset)
            thr = r.array("<i4", filters, f"layer {i} thresholds")
            n_words = filters * in_ch * kh * words_per_row(kw)
            words = r.array("<u8", n_words, f"layer {i} weights")
            try:
                weights = BitTensor((filters, in_ch, kh, kw), words)
            except ValueError as exc:
                raise FormatError(f"layer {i}: {exc}", r.offset) from exc
            layers.append(BinarizedConvLayer(weights, thr, int(stride), int(padding)))
        else:
            raise FormatError(f"unknown layer kind {kind}", r.offset - 1)
    r.expect_eof()

    first = layers[0]
    input_shape = (first.in_features,) if isinstance(first, BinarizedLinearLayer) else None
    try:
        return BnnModel(layers, input_shape)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_model(model: BnnModel, path) -> None:
    with open(path, "wb") as f:
        f.write(dump_model(model))


def load_model(path) -> BnnModel:
    with open(path, "rb") as f:
        return load_model_bytes(f.read())
