"""3D U-Net: construction, forward pass, and binary checkpoints.

Two variants are used by the pipeline: the localizer (5 input channels from
the temporal projection, 3 output classes, dropout + final batchnorm) and
the segmenter (50 time-sample channels, 2 classes, no dropout). Both share
the same contracting/expansive topology; only the config differs.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .binio import atomic_write_bytes
from .engine import (
    BatchNormState,
    Parameter,
    batchnorm,
    concat_channels,
    conv1x1,
    conv3d,
    conv_transpose3d,
    dropout,
    maxpool3d,
    relu,
)
from .engine.tensor import Tensor

CHECKPOINT_MAGIC = b"RCKP"
CHECKPOINT_VERSION = 1
_CONFIG_KEY = "__config__"


class CheckpointError(Exception):
    pass


@dataclass
class UNetConfig:
    in_channels: int
    out_classes: int
    depth: int = 3
    base_filters: int = 8
    use_dropout: bool = False
    dropout_rate: float = 0.25
    use_final_batchnorm: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_classes < 1:
            raise ValueError("in_channels and out_classes must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def filters(self, level):
        return self.base_filters * (2**level)


def localizer_config(pca_components=5, depth=3, base_filters=8, dropout_rate=0.25):
    return UNetConfig(
        in_channels=pca_components,
        out_classes=3,
        depth=depth,
        base_filters=base_filters,
        use_dropout=True,
        dropout_rate=dropout_rate,
        use_final_batchnorm=True,
    )


def segmenter_config(time_samples=50, depth=3, base_filters=8):
    return UNetConfig(
        in_channels=time_samples,
        out_classes=2,
        depth=depth,
        base_filters=base_filters,
        use_dropout=False,
        use_final_batchnorm=True,
    )


def _he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class UNet3D:
    """Parameter collection plus the forward graph implied by its config."""

    def __init__(self, config, params, bn_state=None):
        self.config = config
        self.params = params
        self.bn_state = bn_state
        names = list(params)
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique within a network")

    @classmethod
    def build(cls, config, rng):
        """Initialize all parameters (He-uniform kernels, zero biases)."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        params = {}

        def add_conv(name, c_out, c_in, k):
            fan_in = c_in * k**3
            params[f"{name}_w"] = Parameter(
                _he_uniform(rng, (c_out, c_in, k, k, k), fan_in), f"{name}_w"
            )
            params[f"{name}_b"] = Parameter(np.zeros(c_out, dtype=np.float32), f"{name}_b")

        c_prev = config.in_channels
        for level in range(config.depth):
            f = config.filters(level)
            add_conv(f"enc{level}_conv1", f, c_prev, 3)
            add_conv(f"enc{level}_conv2", f, f, 3)
            c_prev = f

        f_bot = config.filters(config.depth)
        add_conv("bottleneck_conv1", f_bot, c_prev, 3)
        add_conv("bottleneck_conv2", f_bot, f_bot, 3)

        for level in reversed(range(config.depth)):
            f = config.filters(level)
            f_in = config.filters(level + 1)
            fan_in = f_in * 2**3
            params[f"dec{level}_up_w"] = Parameter(
                _he_uniform(rng, (f_in, f, 2, 2, 2), fan_in), f"dec{level}_up_w"
            )
            params[f"dec{level}_up_b"] = Parameter(
                np.zeros(f, dtype=np.float32), f"dec{level}_up_b"
            )
            add_conv(f"dec{level}_conv1", f, 2 * f, 3)
            add_conv(f"dec{level}_conv2", f, f, 3)

        bn_state = None
        f0 = config.filters(0)
        if config.use_final_batchnorm:
            params["bn_gamma"] = Parameter(np.ones(f0, dtype=np.float32), "bn_gamma")
            params["bn_beta"] = Parameter(np.zeros(f0, dtype=np.float32), "bn_beta")
            bn_state = BatchNormState.create(f0)

        params["out_conv_w"] = Parameter(
            _he_uniform(rng, (config.out_classes, f0, 1, 1, 1), f0), "out_conv_w"
        )
        params["out_conv_b"] = Parameter(
            np.zeros(config.out_classes, dtype=np.float32), "out_conv_b"
        )
        return cls(config, params, bn_state)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def cast(self, dtype):
        """Copy with parameters cast to ``dtype`` (float64 path for checking)."""
        params = {
            name: Parameter(p.data.astype(dtype), name) for name, p in self.params.items()
        }
        bn_state = self.bn_state.astype(dtype) if self.bn_state is not None else None
        return UNet3D(self.config, params, bn_state)

    def _double_conv(self, h, prefix):
        h = relu(conv3d(h, self.params[f"{prefix}_conv1_w"], self.params[f"{prefix}_conv1_b"]))
        h = relu(conv3d(h, self.params[f"{prefix}_conv2_w"], self.params[f"{prefix}_conv2_b"]))
        return h

    def forward(self, x, mode="eval", rng=None, trace=None):
        """Run the network; returns per-class logits at the input resolution.

        ``mode`` selects dropout and batch statistics behaviour; ``rng`` is
        required in train mode when the config uses dropout. ``trace`` is an
        optional ``callable(stage_name, tensor)`` instrumentation hook.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4:
            raise ValueError(f"input must be (C, D, H, W), got {x.data.ndim} axes")
        if x.data.shape[0] != self.config.in_channels:
            raise ValueError(
                f"channel axis mismatch: network expects {self.config.in_channels}, "
                f"input has {x.data.shape[0]}"
            )
        divisor = 2**self.config.depth
        for axis, n in zip("DHW", x.data.shape[1:]):
            if n % divisor != 0:
                raise ValueError(
                    f"spatial axis {axis} has size {n}, not divisible by 2^depth={divisor}"
                )
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train" and self.config.use_dropout and rng is None:
            raise ValueError("train-mode forward with dropout requires an rng")

        def emit(name, t):
            if trace is not None:
                trace(name, t)

        skips = []
        h = x
        for level in range(self.config.depth):
            h = self._double_conv(h, f"enc{level}")
            emit(f"enc{level}", h)
            skips.append(h)
            h, _ = maxpool3d(h)
            emit(f"pool{level}", h)
            if self.config.use_dropout:
                h = dropout(h, self.config.dropout_rate, mode, rng)

        h = self._double_conv(h, "bottleneck")
        emit("bottleneck", h)

        for level in reversed(range(self.config.depth)):
            h = conv_transpose3d(
                h, self.params[f"dec{level}_up_w"], self.params[f"dec{level}_up_b"]
            )
            h = concat_channels(skips[level], h)
            h = self._double_conv(h, f"dec{level}")
            emit(f"dec{level}", h)

        if self.config.use_final_batchnorm:
            h = batchnorm(h, self.params["bn_gamma"], self.params["bn_beta"], self.bn_state, mode)
        logits = conv1x1(h, self.params["out_conv_w"], self.params["out_conv_b"])
        emit("logits", logits)
        return logits


def _checkpoint_tensors(net):
    items = [
        (
            _CONFIG_KEY,
            np.array(
                [
                    net.config.in_channels,
                    net.config.out_classes,
                    net.config.depth,
                    net.config.base_filters,
                    1.0 if net.config.use_dropout else 0.0,
                    net.config.dropout_rate,
                    1.0 if net.config.use_final_batchnorm else 0.0,
                ],
                dtype=np.float32,
            ),
        )
    ]
    items.extend((name, p.data) for name, p in net.params.items())
    if net.bn_state is not None:
        items.append(("bn_running_mean", net.bn_state.running_mean))
        items.append(("bn_running_var", net.bn_state.running_var))
    return items


def checkpoint_num_bytes(net):
    """Exact on-disk size of ``save_checkpoint(net)``, from the format layout."""
    total = 4 + 4 + 4  # magic, version, tensor count
    for name, arr in _checkpoint_tensors(net):
        total += 2 + len(name.encode()) + 4 + 4 * arr.ndim + 4 * arr.size
    return total + 4  # trailing CRC-32


def save_checkpoint(net, path):
    """Write the network to ``path`` in the RCKP binary format (atomic)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    tensors = _checkpoint_tensors(net)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Read an RCKP file back into a UNet3D; the roundtrip is bit-exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"{path}: CRC mismatch at byte offset {len(blob) - 4} "
            f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )

    offset = 4
    version = struct.unpack_from("<I", blob, offset)[0]
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    count = struct.unpack_from("<I", blob, offset)[0]
    offset += 4

    tensors = {}
    order = []
    end = len(blob) - 4
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode()
            offset += name_len
            (ndims,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{ndims}I", blob, offset)
            offset += 4 * ndims
            size = int(np.prod(dims, dtype=np.int64)) if ndims else 1
            payload = blob[offset : offset + 4 * size]
            if len(payload) != 4 * size or offset + 4 * size > end:
                raise CheckpointError(f"{path}: truncated tensor payload for {name!r}")
            offset += 4 * size
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated checkpoint header: {exc}") from None
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        order.append(name)

    if _CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: missing {_CONFIG_KEY} record")
    cfg_vec = tensors.pop(_CONFIG_KEY)
    if cfg_vec.shape != (7,):
        raise CheckpointError(f"{path}: malformed config record of shape {cfg_vec.shape}")
    config = UNetConfig(
        in_channels=int(cfg_vec[0]),
        out_classes=int(cfg_vec[1]),
        depth=int(cfg_vec[2]),
        base_filters=int(cfg_vec[3]),
        use_dropout=bool(cfg_vec[4]),
        dropout_rate=float(cfg_vec[5]),
        use_final_batchnorm=bool(cfg_vec[6]),
    )

    net = UNet3D.build(config, rng=0)
    running_mean = tensors.pop("bn_running_mean", None)
    running_var = tensors.pop("bn_running_var", None)
    for name, param in net.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = tensors.pop(name)
        if arr.shape != param.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has dims {arr.shape}, expected {param.data.shape}"
            )
        param.data = np.ascontiguousarray(arr)
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(tensors)}")
    if config.use_final_batchnorm:
        if running_mean is None or running_var is None:
            raise CheckpointError(f"{path}: missing batchnorm running statistics")
        net.bn_state.running_mean = np.ascontiguousarray(running_mean)
        net.bn_state.running_var = np.ascontiguousarray(running_var)
    return net
