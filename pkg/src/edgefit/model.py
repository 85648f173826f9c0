"""The residual 1D CNN: one stem conv, three identity blocks of three convs,
and a dense classifier over the flattened activations.

Every convolution uses 'same' padding at stride 1, so all activations keep
the input length. Each identity block runs conv-BN-ReLU, conv-BN-ReLU,
conv-BN, adds the unmodified block input, and applies a final ReLU.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CorruptFile, InvalidConfig, ShapeMismatch, VersionMismatch

_MODEL_MAGIC = b"EFM1"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 7
    seq_len: int = 40
    classes: int = 12
    width: int = 52
    kernel: int = 3
    blocks: int = 3
    convs_per_block: int = 3
    bn_eps: float = 1e-3

    def __post_init__(self):
        # keep bn_eps float32-exact so the file format round-trips the config
        object.__setattr__(self, "bn_eps", float(np.float32(self.bn_eps)))

    def validate(self) -> None:
        if min(self.in_channels, self.seq_len, self.classes, self.width,
               self.blocks, self.convs_per_block) < 1:
            raise InvalidConfig(f"non-positive dimension in {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig(f"kernel must be odd and positive, got {self.kernel}")
        if self.bn_eps < 0:
            raise InvalidConfig(f"bn_eps must be >= 0, got {self.bn_eps}")


@dataclass
class ConvLayer:
    """One convolution with its batch-normalization parameters."""

    w: np.ndarray       # (C_out, C_in, K)
    b: np.ndarray       # (C_out,)
    gamma: np.ndarray   # (C_out,)
    beta: np.ndarray
    mean: np.ndarray    # running mean
    var: np.ndarray     # running variance


@dataclass
class ModelParams:
    config: ModelConfig
    stem: ConvLayer
    blocks: list[list[ConvLayer]]
    head_w: np.ndarray   # (classes, seq_len*width)
    head_b: np.ndarray   # (classes,)
    bn_folded: bool = False

    def conv_layers(self):
        """Yield (name, ConvLayer) in execution order."""
        yield "stem", self.stem
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                yield f"b{i}.c{j}", layer

    def param_items(self):
        """Yield (name, array) for every trainable tensor, fixed order.

        Running BN statistics are excluded; they are updated by momentum,
        not by gradient descent.
        """
        for name, layer in self.conv_layers():
            yield f"{name}.w", layer.w
            yield f"{name}.b", layer.b
            if not self.bn_folded:
                yield f"{name}.gamma", layer.gamma
                yield f"{name}.beta", layer.beta
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def all_tensors(self):
        """Yield (name, array) for every tensor including running stats."""
        for name, layer in self.conv_layers():
            for attr in ("w", "b", "gamma", "beta", "mean", "var"):
                yield f"{name}.{attr}", getattr(layer, attr)
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def copy(self) -> "ModelParams":
        def cl(layer: ConvLayer) -> ConvLayer:
            return ConvLayer(*(getattr(layer, a).copy()
                               for a in ("w", "b", "gamma", "beta", "mean", "var")))
        return ModelParams(
            config=self.config,
            stem=cl(self.stem),
            blocks=[[cl(l) for l in blk] for blk in self.blocks],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            bn_folded=self.bn_folded,
        )

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for layer in [out.stem] + [l for blk in out.blocks for l in blk]:
            for a in ("w", "b", "gamma", "beta", "mean", "var"):
                setattr(layer, a, getattr(layer, a).astype(dtype))
        out.head_w = out.head_w.astype(dtype)
        out.head_b = out.head_b.astype(dtype)
        return out


def build(config: ModelConfig, seed: int) -> ModelParams:
    """He-uniform initialized parameters, deterministic in the seed."""
    config.validate()
    rng = np.random.default_rng(seed)

    def he_uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv_layer(c_out, c_in):
        k = config.kernel
        return ConvLayer(
            w=he_uniform((c_out, c_in, k), c_in * k),
            b=np.zeros(c_out, dtype=np.float32),
            gamma=np.ones(c_out, dtype=np.float32),
            beta=np.zeros(c_out, dtype=np.float32),
            mean=np.zeros(c_out, dtype=np.float32),
            var=np.ones(c_out, dtype=np.float32),
        )

    c = config.width
    stem = conv_layer(c, config.in_channels)
    blocks = [[conv_layer(c, c) for _ in range(config.convs_per_block)]
              for _ in range(config.blocks)]
    flat = config.seq_len * c
    head_w = he_uniform((config.classes, flat), flat)
    head_b = np.zeros(config.classes, dtype=np.float32)
    return ModelParams(config, stem, blocks, head_w, head_b)


def _bn(layer: ConvLayer, x: np.ndarray, eps: float, folded: bool) -> np.ndarray:
    if folded:
        return x
    return kernels.batchnorm_infer(x, layer.gamma, layer.beta,
                                   layer.mean, layer.var, eps)


def forward_batch(m: ModelParams, x: np.ndarray,
                  capture: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Inference forward over a batch (B, in_channels, seq_len) -> (B, classes).

    With capture given, per-site activations are stored under the names the
    quantizer calibrates against: input, stem, b{i}.r1, b{i}.r2, b{i}.conv3,
    b{i}.out, logits.
    """
    cfg = m.config
    if x.ndim != 3 or x.shape[1:] != (cfg.in_channels, cfg.seq_len):
        raise ShapeMismatch(
            f"expected (B, {cfg.in_channels}, {cfg.seq_len}), got {x.shape}")
    eps = cfg.bn_eps

    def record(name, arr):
        if capture is not None:
            capture[name] = arr

    record("input", x)
    a = kernels.relu(_bn(m.stem, kernels.conv1d_same_batch(x, m.stem.w, m.stem.b),
                         eps, m.bn_folded))
    record("stem", a)
    for i, block in enumerate(m.blocks):
        skip = a
        h = a
        for j, layer in enumerate(block):
            h = _bn(layer, kernels.conv1d_same_batch(h, layer.w, layer.b),
                    eps, m.bn_folded)
            if j < len(block) - 1:
                h = kernels.relu(h)
                record(f"b{i}.r{j + 1}", h)
        record(f"b{i}.conv3", h)
        a = kernels.relu(kernels.add(h, skip))
        record(f"b{i}.out", a)
    flat = a.reshape(a.shape[0], -1)
    logits = kernels.dense_batch(flat, m.head_w, m.head_b)
    record("logits", logits)
    return logits


def forward(m: ModelParams, x: np.ndarray) -> np.ndarray:
    """Single-window forward (in_channels, seq_len) -> logits (classes,)."""
    cfg = m.config
    if x.ndim != 2 or x.shape != (cfg.in_channels, cfg.seq_len):
        raise ShapeMismatch(
            f"expected ({cfg.in_channels}, {cfg.seq_len}), got {x.shape}")
    logits = forward_batch(m, x[None])[0]
    return kernels.check_finite(logits, "logits")


def calibration_sites(config: ModelConfig) -> list[str]:
    """Activation names forward_batch captures, in execution order."""
    sites = ["input", "stem"]
    for i in range(config.blocks):
        for j in range(1, config.convs_per_block):
            sites.append(f"b{i}.r{j}")
        sites.append(f"b{i}.conv3")
        sites.append(f"b{i}.out")
    sites.append("logits")
    return sites


@dataclass
class MacReport:
    per_layer: dict[str, int]
    total: int
    param_count: int
    flash_bytes_int8: int
    peak_activation_bytes: int

    def as_text(self) -> str:
        width = max(len(k) for k in self.per_layer) + 2
        lines = ["layer" + " " * (width - 5) + "MACs"]
        for name, macs in self.per_layer.items():
            lines.append(f"{name:<{width}}{macs:>12,}")
        lines.append(f"{'total':<{width}}{self.total:>12,}")
        lines.append("")
        lines.append(f"parameters            {self.param_count:,}")
        lines.append(f"flash (int8 model)    {self.flash_bytes_int8 / 1024:.2f} kB")
        lines.append(f"peak activations      {self.peak_activation_bytes / 1024:.2f} kB")
        return "\n".join(lines)

    def as_kv(self) -> str:
        lines = [f"macs.{k}={v}" for k, v in self.per_layer.items()]
        lines += [
            f"macs.total={self.total}",
            f"param_count={self.param_count}",
            f"flash_bytes_int8={self.flash_bytes_int8}",
            f"peak_activation_bytes={self.peak_activation_bytes}",
        ]
        return "\n".join(lines)


def count_macs(config: ModelConfig) -> MacReport:
    """Per-layer multiply-accumulate counts and memory footprint estimates.

    Counting convention: one MAC per multiply-accumulate in convolutions and
    the dense head; BN, ReLU, and the residual add are excluded. Flash
    assumes int8 weights, int32 biases, and one float32 scale per output
    channel. Peak activations assume int8 buffers with the block input kept
    alive for the skip connection.
    """
    config.validate()
    c, l, k = config.width, config.seq_len, config.kernel
    per_layer: dict[str, int] = {"stem": l * k * config.in_channels * c}
    for i in range(config.blocks):
        for j in range(config.convs_per_block):
            per_layer[f"b{i}.c{j}"] = l * k * c * c
    per_layer["head"] = l * c * config.classes
    total = sum(per_layer.values())

    conv_shapes = [(c, config.in_channels)] + \
        [(c, c)] * (config.blocks * config.convs_per_block)
    weights = sum(co * ci * k for co, ci in conv_shapes) + config.classes * l * c
    biases = sum(co for co, _ in conv_shapes) + config.classes
    out_channels = biases
    flash = weights * 1 + biases * 4 + out_channels * 4

    act = c * l   # int8 bytes of one full-width activation
    peak = max(config.in_channels * l + act,   # stem
               3 * act,                        # inside a block: skip + in + out
               act + config.classes * 4)       # head (int32 logits)
    return MacReport(per_layer=per_layer, total=total,
                     param_count=weights + biases,
                     flash_bytes_int8=flash,
                     peak_activation_bytes=peak)


def fold_batchnorm(m: ModelParams) -> ModelParams:
    """Absorb every BN into its convolution: w' = w*g/sqrt(v+eps) per output
    channel, b' = (b-mean)*g/sqrt(v+eps)+beta. The result skips BN entirely
    (its BN parameters are identity and bn_eps is zeroed, so folding again
    is a no-op)."""
    out = m.copy()
    eps = m.config.bn_eps if not m.bn_folded else 0.0
    for _, layer in out.conv_layers():
        scale = (layer.gamma / np.sqrt(layer.var + eps)).astype(np.float32)
        layer.w = (layer.w * scale[:, None, None]).astype(np.float32)
        layer.b = ((layer.b - layer.mean) * scale + layer.beta).astype(np.float32)
        c = layer.b.shape[0]
        layer.gamma = np.ones(c, dtype=np.float32)
        layer.beta = np.zeros(c, dtype=np.float32)
        layer.mean = np.zeros(c, dtype=np.float32)
        layer.var = np.ones(c, dtype=np.float32)
    out.config = dataclasses.replace(m.config, bn_eps=0.0)
    out.bn_folded = True
    return out


def _pack_config(config: ModelConfig) -> bytes:
    return struct.pack("<7Hf", config.in_channels, config.seq_len, config.classes,
                       config.width, config.kernel, config.blocks,
                       config.convs_per_block, config.bn_eps)


def _unpack_config(blob: bytes, offset: int) -> tuple[ModelConfig, int]:
    vals = struct.unpack_from("<7Hf", blob, offset)
    cfg = ModelConfig(*[int(v) for v in vals[:7]], bn_eps=float(vals[7]))
    return cfg, offset + struct.calcsize("<7Hf")


def _pack_tensor(arr: np.ndarray) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _unpack_tensor(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    try:
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
    except struct.error:
        raise CorruptFile("truncated tensor record") from None
    count = int(np.prod(shape)) if ndim else 1
    if offset + 4 * count > len(blob):
        raise CorruptFile("truncated tensor data")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + 4 * count


def save(m: ModelParams, path: str | Path) -> None:
    """Write the model container: magic, version, flags, config, then every
    tensor (including running BN stats) in declaration order."""
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<BB", _MODEL_VERSION, 1 if m.bn_folded else 0))
        f.write(_pack_config(m.config))
        for _, arr in m.all_tensors():
            f.write(_pack_tensor(arr))


def load(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CorruptFile(f"model file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 6 + struct.calcsize("<7Hf"):
        raise CorruptFile(f"model file too short: {path}")
    if blob[:4] != _MODEL_MAGIC:
        raise VersionMismatch(f"bad magic {blob[:4]!r}, expected {_MODEL_MAGIC!r}")
    version, folded = struct.unpack_from("<BB", blob, 4)
    if version != _MODEL_VERSION:
        raise VersionMismatch(f"unsupported model version {version}")
    config, offset = _unpack_config(blob, 6)
    config.validate()

    def take(offset):
        nonlocal blob
        return _unpack_tensor(blob, offset)

    def read_layer(offset):
        vals = []
        for _ in range(6):
            arr, offset = take(offset)
            vals.append(arr)
        return ConvLayer(*vals), offset

    stem, offset = read_layer(offset)
    blocks = []
    for _ in range(config.blocks):
        block = []
        for _ in range(config.convs_per_block):
            layer, offset = read_layer(offset)
            block.append(layer)
        blocks.append(block)
    head_w, offset = take(offset)
    head_b, offset = take(offset)
    if offset != len(blob):
        raise CorruptFile(f"{len(blob) - offset} trailing bytes in {path}")
    return ModelParams(config, stem, blocks, head_w, head_b,
                       bn_folded=bool(folded))
