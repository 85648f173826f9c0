"""Post-training 8-bit quantization and the integer-only inference path.

Scheme: symmetric per-output-channel int8 weights, asymmetric per-tensor
int8 activations, int32 biases at scale s_in*s_w. Each layer rescales its
int32 accumulator to the next activation's int8 grid with a fixed-point
multiplier M0 in [2^30, 2^31) and a right shift n, so nothing between the
input quantization and the final logit dequantization touches floats.
Tensor quantization rounds half away from zero; the accumulator rescale
rounds half up (add 2^(shift-1), then arithmetic right shift).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import Window
from .errors import (
    AccumulatorOverflow,
    CorruptFile,
    EmptyCalibrationSet,
    InvalidConfig,
    MissingCalibration,
    RequantRangeError,
    ShapeMismatch,
    VersionMismatch,
)
from .model import (
    ModelConfig,
    ModelParams,
    _pack_config,
    _unpack_config,
    calibration_sites,
    forward_batch,
)

QMIN, QMAX = -128, 127
RANGE_FLOOR = 1e-3      # minimum activation range width
WEIGHT_SCALE_FLOOR = 1e-12
INT32_LIMIT = 2 ** 31

_QUANT_MAGIC = b"EFQ1"
_QUANT_VERSION = 1


@dataclass(frozen=True)
class QuantSpec:
    """Affine int8 mapping: real = scale * (q - zero_point)."""

    scale: float
    zero_point: int


@dataclass
class QuantTensor:
    values: np.ndarray       # int8
    scale: np.ndarray        # float32 scalar array, or (C,) for per-channel
    zero_point: np.ndarray   # int32, same shape as scale


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero, as int64."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(np.int64)


def quantize_tensor(x: np.ndarray, mode: str = "symmetric",
                    channel_axis: int | None = None) -> QuantTensor:
    """Quantize a float tensor to int8.

    symmetric: scale = max|x| / 127 (per channel_axis when given), zero
    point 0; an all-zero tensor gets the scale floor instead of an error.
    affine: per-tensor scale (max-min)/255 over a range widened to include 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidConfig("cannot quantize non-finite tensor")
    if mode == "symmetric":
        if channel_axis is None:
            scale = np.array(np.abs(x).max(), dtype=np.float64)
        else:
            reduce_axes = tuple(a for a in range(x.ndim) if a != channel_axis)
            scale = np.abs(x).max(axis=reduce_axes)
        scale = np.maximum(scale / QMAX, WEIGHT_SCALE_FLOOR).astype(np.float32)
        zp = np.zeros_like(scale, dtype=np.int32)
        if channel_axis is None:
            q = round_half_away(x / float(scale))
        else:
            shape = [1] * x.ndim
            shape[channel_axis] = -1
            q = round_half_away(x / scale.astype(np.float64).reshape(shape))
    elif mode == "affine":
        lo = min(float(x.min()), 0.0)
        hi = max(float(x.max()), 0.0)
        spec = activation_spec(lo, hi)
        scale = np.array(spec.scale, dtype=np.float32)
        zp = np.array(spec.zero_point, dtype=np.int32)
        q = round_half_away(x / float(scale)) + int(zp)
    else:
        raise InvalidConfig(f"unknown quantization mode '{mode}'")
    values = np.clip(q, QMIN, QMAX).astype(np.int8)
    return QuantTensor(values=values, scale=scale, zero_point=zp)


def dequantize(qt: QuantTensor) -> np.ndarray:
    scale = qt.scale.astype(np.float32)
    zp = qt.zero_point.astype(np.float32)
    if scale.ndim == 1 and qt.values.ndim > 1:
        shape = [1] * qt.values.ndim
        shape[0] = -1
        scale = scale.reshape(shape)
        zp = zp.reshape(shape)
    return (qt.values.astype(np.float32) - zp) * scale


def activation_spec(lo: float, hi: float) -> QuantSpec:
    """Affine spec over [lo, hi], widened to include 0 and floored in width."""
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    if hi - lo < RANGE_FLOOR:
        hi = lo + RANGE_FLOOR
    scale = float(np.float32((hi - lo) / (QMAX - QMIN)))
    zp = int(round_half_away(np.array(QMIN - lo / scale)))
    return QuantSpec(scale=scale, zero_point=int(np.clip(zp, QMIN, QMAX)))


@dataclass
class CalibStats:
    """Observed activation ranges, widened so zero is always representable."""

    ranges: dict[str, tuple[float, float]]

    def update(self, name: str, arr: np.ndarray) -> None:
        lo = min(float(arr.min()), 0.0)
        hi = max(float(arr.max()), 0.0)
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.ranges[name] = (lo, hi)

    def range_of(self, name: str) -> tuple[float, float]:
        if name not in self.ranges:
            raise MissingCalibration(name)
        return self.ranges[name]


def calibrate(folded: ModelParams, calib: list[Window]) -> CalibStats:
    """Record per-site activation ranges of the folded float model.

    Windows run one at a time so the recorded ranges are independent of any
    batching (GEMM accumulation order varies with batch shape)."""
    if not folded.bn_folded:
        raise InvalidConfig("calibrate expects a BN-folded model")
    if not calib:
        raise EmptyCalibrationSet("calibration set is empty")
    stats = CalibStats(ranges={})
    for w in calib:
        capture: dict[str, np.ndarray] = {}
        forward_batch(folded, w.data.astype(np.float32)[None], capture=capture)
        for name, arr in capture.items():
            stats.update(name, arr)
    return stats


# ---------------------------------------------------------------------------
# fixed-point requantization
# ---------------------------------------------------------------------------

def quantize_multiplier(ratio: float) -> tuple[int, int]:
    """Express ratio as M0 * 2^-(31+n) with M0 in [2^30, 2^31).

    n is negative for ratios >= 1 (the residual add can need that); the
    representation is exact to within half an ulp of M0.
    """
    if not (ratio > 0 and math.isfinite(ratio)):
        raise RequantRangeError(f"scale ratio must be positive, got {ratio}")
    mantissa, exponent = math.frexp(ratio)     # ratio = mantissa * 2^exponent
    m0 = round(mantissa * (1 << 31))
    if m0 == (1 << 31):
        m0 >>= 1
        exponent += 1
    n = -exponent
    if 31 + n < 1:
        raise RequantRangeError(f"scale ratio {ratio} too large to represent")
    return m0, n


def requantize(acc: int, m0: int, n: int, zero_point_out: int) -> int:
    """Rescale an int32 accumulator to int8: round-half-up of
    acc*M0 / 2^(31+n), plus the output zero point, saturated to [-128, 127].
    Exact 64-bit integer arithmetic throughout."""
    if not (1 << 30) <= m0 < (1 << 31):
        raise RequantRangeError(f"M0 {m0} outside [2^30, 2^31)")
    if n < 0:
        raise RequantRangeError(f"shift n must be >= 0, got {n}")
    return _requantize_int(acc, m0, n, zero_point_out)


def _requantize_int(acc: int, m0: int, n: int, zero_point_out: int) -> int:
    shift = 31 + n
    t = int(acc) * int(m0)
    value = (t + (1 << (shift - 1))) >> shift
    return max(QMIN, min(QMAX, value + zero_point_out))


def _rescale_array(acc: np.ndarray, m0: np.ndarray,
                   shift_n: np.ndarray) -> np.ndarray:
    """Round-half-up of acc*M0 / 2^(31+n), unclamped, as int64."""
    shift = 31 + shift_n
    t = acc * m0
    half = np.left_shift(np.int64(1), shift - 1)
    return (t + half) >> shift


def _requantize_array(acc: np.ndarray, m0: np.ndarray, shift_n: np.ndarray,
                      zero_point_out: int) -> np.ndarray:
    """Vectorized requantize; acc int64, m0/shift_n broadcastable int64."""
    value = _rescale_array(acc, m0, shift_n)
    return np.clip(value + zero_point_out, QMIN, QMAX).astype(np.int8)


# ---------------------------------------------------------------------------
# quantized model
# ---------------------------------------------------------------------------

@dataclass
class QConvLayer:
    name: str
    w_q: np.ndarray           # (C_out, C_in, K) int8
    w_scale: np.ndarray       # (C_out,) float32
    bias_q: np.ndarray        # (C_out,) int32
    in_spec: QuantSpec
    out_spec: QuantSpec
    m0: np.ndarray            # (C_out,) int32
    shift: np.ndarray         # (C_out,) int32
    relu: bool


@dataclass
class QAdd:
    """Residual merge: both addends rescaled into the output spec."""

    a_spec: QuantSpec         # block input
    h_spec: QuantSpec         # last conv output
    out_spec: QuantSpec
    a_m0: int
    a_shift: int
    h_m0: int
    h_shift: int


@dataclass
class QDense:
    w_q: np.ndarray           # (classes, N) int8
    w_scale: np.ndarray       # (classes,) float32
    bias_q: np.ndarray        # (classes,) int32
    in_spec: QuantSpec


@dataclass
class QBlock:
    convs: list[QConvLayer]
    add: QAdd


@dataclass
class QuantModel:
    config: ModelConfig
    input_spec: QuantSpec
    stem: QConvLayer
    blocks: list[QBlock]
    head: QDense

    def layers(self):
        yield self.stem
        for block in self.blocks:
            yield from block.convs


def _quantize_conv(name: str, w: np.ndarray, b: np.ndarray,
                   in_spec: QuantSpec, out_spec: QuantSpec,
                   relu: bool) -> QConvLayer:
    qt = quantize_tensor(w, "symmetric", channel_axis=0)
    w_scale = qt.scale.astype(np.float32)
    bias_scale = in_spec.scale * w_scale.astype(np.float64)
    bias_real = b.astype(np.float64) / bias_scale
    if not np.all(np.isfinite(bias_real)) or np.any(np.abs(bias_real) >= INT32_LIMIT):
        raise AccumulatorOverflow(f"{name}: quantized bias exceeds int32")
    bias_q = round_half_away(bias_real)
    ratios = bias_scale / out_spec.scale
    pairs = [quantize_multiplier(float(r)) for r in ratios]
    m0 = np.array([p[0] for p in pairs], dtype=np.int32)
    shift = np.array([p[1] for p in pairs], dtype=np.int32)
    fan_in = w.shape[1] * w.shape[2]
    worst = fan_in * QMAX * 255 + int(np.abs(bias_q).max(initial=0))
    if worst >= INT32_LIMIT:
        raise AccumulatorOverflow(
            f"{name}: worst-case accumulator {worst} does not fit int32")
    return QConvLayer(name=name, w_q=qt.values, w_scale=w_scale,
                      bias_q=bias_q.astype(np.int32),
                      in_spec=in_spec, out_spec=out_spec,
                      m0=m0, shift=shift, relu=relu)


def quantize_model(folded: ModelParams, stats: CalibStats) -> QuantModel:
    """Build the int8 model from a folded float model and calibration ranges."""
    if not folded.bn_folded:
        raise InvalidConfig("quantize_model expects a BN-folded model")
    cfg = folded.config
    for site in calibration_sites(cfg):
        stats.range_of(site)

    input_spec = activation_spec(*stats.range_of("input"))
    stem_out = activation_spec(*stats.range_of("stem"))
    stem = _quantize_conv("stem", folded.stem.w, folded.stem.b,
                          input_spec, stem_out, relu=True)

    blocks = []
    current = stem_out
    for i, block in enumerate(folded.blocks):
        block_in = current
        convs = []
        for j, layer in enumerate(block):
            if j < cfg.convs_per_block - 1:
                out_spec = activation_spec(*stats.range_of(f"b{i}.r{j + 1}"))
                relu = True
            else:
                out_spec = activation_spec(*stats.range_of(f"b{i}.conv3"))
                relu = False
            convs.append(_quantize_conv(f"b{i}.c{j}", layer.w, layer.b,
                                        current, out_spec, relu))
            current = out_spec
        out_spec = activation_spec(*stats.range_of(f"b{i}.out"))
        a_m0, a_shift = quantize_multiplier(block_in.scale / out_spec.scale)
        h_m0, h_shift = quantize_multiplier(current.scale / out_spec.scale)
        blocks.append(QBlock(convs=convs, add=QAdd(
            a_spec=block_in, h_spec=current, out_spec=out_spec,
            a_m0=a_m0, a_shift=a_shift, h_m0=h_m0, h_shift=h_shift)))
        current = out_spec

    qt = quantize_tensor(folded.head_w, "symmetric", channel_axis=0)
    head_scale = current.scale * qt.scale.astype(np.float64)
    head_real = folded.head_b.astype(np.float64) / head_scale
    if not np.all(np.isfinite(head_real)) or np.any(np.abs(head_real) >= INT32_LIMIT):
        raise AccumulatorOverflow("head: quantized bias exceeds int32")
    head_bias = round_half_away(head_real)
    fan_in = folded.head_w.shape[1]
    worst = fan_in * QMAX * 255 + int(np.abs(head_bias).max(initial=0))
    if worst >= INT32_LIMIT:
        raise AccumulatorOverflow(
            f"head: worst-case accumulator {worst} does not fit int32")
    head = QDense(w_q=qt.values, w_scale=qt.scale.astype(np.float32),
                  bias_q=head_bias.astype(np.int32), in_spec=current)
    return QuantModel(config=cfg, input_spec=input_spec, stem=stem,
                      blocks=blocks, head=head)


# ---------------------------------------------------------------------------
# integer inference
# ---------------------------------------------------------------------------

def _note(trace, name, arr):
    if trace is not None:
        trace.append((name, str(arr.dtype)))


def _qconv_run(layer: QConvLayer, x_q: np.ndarray, trace) -> np.ndarray:
    """x_q: (B, C_in, L) int8 -> (B, C_out, L) int8."""
    batch, c_in, length = x_q.shape
    c_out, _, k = layer.w_q.shape
    if c_in != layer.w_q.shape[1]:
        raise ShapeMismatch(f"{layer.name}: input channels {c_in} != "
                            f"{layer.w_q.shape[1]}")
    pad = (k - 1) // 2
    shifted = x_q.astype(np.int32) - layer.in_spec.zero_point
    xp = np.pad(shifted, ((0, 0), (0, 0), (pad, pad)))
    cols = kernels.im2col(xp, k, length)
    flat = cols.transpose(1, 0, 2).reshape(c_in * k, batch * length)
    acc = layer.w_q.reshape(c_out, -1).astype(np.int32) @ flat
    acc = acc.reshape(c_out, batch, length).transpose(1, 0, 2)
    acc = acc + layer.bias_q[None, :, None]
    _note(trace, f"{layer.name}.acc", acc)
    q = _requantize_array(acc.astype(np.int64),
                          layer.m0.astype(np.int64)[None, :, None],
                          layer.shift.astype(np.int64)[None, :, None],
                          layer.out_spec.zero_point)
    if layer.relu:
        q = np.maximum(q, np.int8(layer.out_spec.zero_point))
    _note(trace, layer.name, q)
    return q


def _qadd_run(add: QAdd, q_a: np.ndarray, q_h: np.ndarray, trace) -> np.ndarray:
    # rescale unclamped (addends may exceed int8 range before saturation)
    a = _rescale_array(q_a.astype(np.int64) - add.a_spec.zero_point,
                       np.int64(add.a_m0), np.int64(add.a_shift))
    h = _rescale_array(q_h.astype(np.int64) - add.h_spec.zero_point,
                       np.int64(add.h_m0), np.int64(add.h_shift))
    q = np.clip(a + h + add.out_spec.zero_point, QMIN, QMAX).astype(np.int8)
    q = np.maximum(q, np.int8(add.out_spec.zero_point))   # fused ReLU
    _note(trace, "add", q)
    return q


def quantize_input(spec: QuantSpec, x: np.ndarray) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / spec.scale)
    return np.clip(q + spec.zero_point, QMIN, QMAX).astype(np.int8)


def qforward_batch(qm: QuantModel, x: np.ndarray,
                   trace: list | None = None) -> np.ndarray:
    """Integer inference over a batch (B, in_channels, seq_len) of float
    windows; only the input quantization and the final logit dequantization
    use floating point."""
    cfg = qm.config
    if x.ndim != 3 or x.shape[1:] != (cfg.in_channels, cfg.seq_len):
        raise ShapeMismatch(
            f"expected (B, {cfg.in_channels}, {cfg.seq_len}), got {x.shape}")
    q = quantize_input(qm.input_spec, x)
    _note(trace, "input", q)
    q = _qconv_run(qm.stem, q, trace)
    for block in qm.blocks:
        q_in = q
        for layer in block.convs:
            q = _qconv_run(layer, q, trace)
        q = _qadd_run(block.add, q_in, q, trace)
    flat = q.reshape(q.shape[0], -1)
    shifted = flat.astype(np.int32) - qm.head.in_spec.zero_point
    acc = shifted @ qm.head.w_q.astype(np.int32).T + qm.head.bias_q[None, :]
    _note(trace, "head.acc", acc)
    scale = qm.head.in_spec.scale * qm.head.w_scale.astype(np.float64)
    return (acc.astype(np.float64) * scale[None, :]).astype(np.float32)


def qforward(qm: QuantModel, x: np.ndarray,
             trace: list | None = None) -> np.ndarray:
    """Single-window integer inference -> float logits (classes,)."""
    cfg = qm.config
    if x.shape != (cfg.in_channels, cfg.seq_len):
        raise ShapeMismatch(
            f"expected ({cfg.in_channels}, {cfg.seq_len}), got {x.shape}")
    return qforward_batch(qm, x[None], trace=trace)[0]


def count_float_entries(trace: list) -> int:
    """Float-typed intermediates recorded between input quantization and
    logit dequantization; the integer path contract requires zero."""
    return sum(1 for _, dtype in trace if dtype.startswith("float"))


def evaluate_quant(qm: QuantModel, windows: list[Window], batch: int = 256):
    """Argmax Metrics of the integer path over a window list."""
    from .training import EmptyTestSet, metrics_from_logits
    if not windows:
        raise EmptyTestSet("evaluate needs at least one window")
    x = np.stack([w.data for w in windows]).astype(np.float32)
    y = np.array([w.label for w in windows], dtype=np.int64)
    wt = np.array([w.weight for w in windows], dtype=np.float32)
    logits = np.concatenate([qforward_batch(qm, x[i:i + batch])
                             for i in range(0, len(x), batch)])
    return metrics_from_logits(logits, y, wt, qm.config.classes)


def check_quant_invariants(qm: QuantModel) -> None:
    """Verify the fixed-point contract on every layer; raises on violation."""
    for layer in qm.layers():
        ratios = (layer.in_spec.scale
                  * layer.w_scale.astype(np.float64)) / layer.out_spec.scale
        for m0, n, r in zip(layer.m0, layer.shift, ratios):
            if not (1 << 30) <= int(m0) < (1 << 31):
                raise RequantRangeError(f"{layer.name}: M0 {m0} out of range")
            approx = int(m0) * 2.0 ** (-31 - int(n))
            if abs(approx - r) / r > 2 ** -24:
                raise RequantRangeError(
                    f"{layer.name}: multiplier error {abs(approx - r) / r}")
    for block in qm.blocks:
        add = block.add
        for m0, n, r in ((add.a_m0, add.a_shift,
                          add.a_spec.scale / add.out_spec.scale),
                         (add.h_m0, add.h_shift,
                          add.h_spec.scale / add.out_spec.scale)):
            if not (1 << 30) <= m0 < (1 << 31):
                raise RequantRangeError(f"residual add: M0 {m0} out of range")
            approx = m0 * 2.0 ** (-31 - n)
            if abs(approx - r) / r > 2 ** -24:
                raise RequantRangeError("residual add: multiplier error")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _pack_arr(arr: np.ndarray, dtype: str) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _unpack_arr(blob: bytes, offset: int, dtype: str):
    try:
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
    except struct.error:
        raise CorruptFile("truncated array record") from None
    count = int(np.prod(shape))
    itemsize = np.dtype(dtype).itemsize
    if offset + count * itemsize > len(blob):
        raise CorruptFile("truncated array data")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + count * itemsize


def _pack_spec(spec: QuantSpec) -> bytes:
    return struct.pack("<fi", spec.scale, spec.zero_point)


def _unpack_spec(blob: bytes, offset: int):
    try:
        scale, zp = struct.unpack_from("<fi", blob, offset)
    except struct.error:
        raise CorruptFile("truncated quant spec") from None
    return QuantSpec(scale=float(scale), zero_point=int(zp)), offset + 8


def save(qm: QuantModel, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(_QUANT_MAGIC)
        f.write(struct.pack("<B", _QUANT_VERSION))
        f.write(_pack_config(qm.config))
        f.write(_pack_spec(qm.input_spec))

        def write_layer(layer: QConvLayer):
            f.write(_pack_arr(layer.w_q, "<i1"))
            f.write(_pack_arr(layer.w_scale, "<f4"))
            f.write(_pack_arr(layer.bias_q, "<i4"))
            f.write(_pack_spec(layer.in_spec))
            f.write(_pack_spec(layer.out_spec))
            f.write(_pack_arr(layer.m0, "<i4"))
            f.write(_pack_arr(layer.shift, "<i4"))
            f.write(struct.pack("<B", 1 if layer.relu else 0))

        write_layer(qm.stem)
        for block in qm.blocks:
            for layer in block.convs:
                write_layer(layer)
            add = block.add
            f.write(_pack_spec(add.a_spec))
            f.write(_pack_spec(add.h_spec))
            f.write(_pack_spec(add.out_spec))
            f.write(struct.pack("<4i", add.a_m0, add.a_shift,
                                add.h_m0, add.h_shift))
        f.write(_pack_arr(qm.head.w_q, "<i1"))
        f.write(_pack_arr(qm.head.w_scale, "<f4"))
        f.write(_pack_arr(qm.head.bias_q, "<i4"))
        f.write(_pack_spec(qm.head.in_spec))


def load(path: str | Path) -> QuantModel:
    path = Path(path)
    if not path.is_file():
        raise CorruptFile(f"quantized model not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 5 + struct.calcsize("<7Hf"):
        raise CorruptFile(f"quantized model too short: {path}")
    if blob[:4] != _QUANT_MAGIC:
        raise VersionMismatch(f"bad magic {blob[:4]!r}, expected {_QUANT_MAGIC!r}")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != _QUANT_VERSION:
        raise VersionMismatch(f"unsupported quantized model version {version}")
    config, offset = _unpack_config(blob, 5)
    config.validate()
    input_spec, offset = _unpack_spec(blob, offset)

    def read_layer(name, offset):
        w_q, offset = _unpack_arr(blob, offset, "<i1")
        w_scale, offset = _unpack_arr(blob, offset, "<f4")
        bias_q, offset = _unpack_arr(blob, offset, "<i4")
        in_spec, offset = _unpack_spec(blob, offset)
        out_spec, offset = _unpack_spec(blob, offset)
        m0, offset = _unpack_arr(blob, offset, "<i4")
        shift, offset = _unpack_arr(blob, offset, "<i4")
        try:
            (relu,) = struct.unpack_from("<B", blob, offset)
        except struct.error:
            raise CorruptFile("truncated layer record") from None
        layer = QConvLayer(name=name, w_q=w_q, w_scale=w_scale, bias_q=bias_q,
                           in_spec=in_spec, out_spec=out_spec, m0=m0,
                           shift=shift, relu=bool(relu))
        return layer, offset + 1

    stem, offset = read_layer("stem", offset)
    blocks = []
    for i in range(config.blocks):
        convs = []
        for j in range(config.convs_per_block):
            layer, offset = read_layer(f"b{i}.c{j}", offset)
            convs.append(layer)
        a_spec, offset = _unpack_spec(blob, offset)
        h_spec, offset = _unpack_spec(blob, offset)
        out_spec, offset = _unpack_spec(blob, offset)
        try:
            a_m0, a_shift, h_m0, h_shift = struct.unpack_from("<4i", blob, offset)
        except struct.error:
            raise CorruptFile("truncated residual add record") from None
        offset += 16
        blocks.append(QBlock(convs=convs, add=QAdd(
            a_spec=a_spec, h_spec=h_spec, out_spec=out_spec,
            a_m0=a_m0, a_shift=a_shift, h_m0=h_m0, h_shift=h_shift)))
    w_q, offset = _unpack_arr(blob, offset, "<i1")
    w_scale, offset = _unpack_arr(blob, offset, "<f4")
    bias_q, offset = _unpack_arr(blob, offset, "<i4")
    in_spec, offset = _unpack_spec(blob, offset)
    if offset != len(blob):
        raise CorruptFile(f"{len(blob) - offset} trailing bytes in {path}")
    head = QDense(w_q=w_q, w_scale=w_scale, bias_q=bias_q, in_spec=in_spec)
    return QuantModel(config=config, input_spec=input_spec, stem=stem,
                      blocks=blocks, head=head)
