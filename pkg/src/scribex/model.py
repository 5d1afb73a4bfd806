"""Miniature encoder-decoder predictor with scSE attention.

The network maps a (C, H, W) image to a two-channel per-pixel probability
map (channel 0 = target, channel 1 = background) whose channels sum to 1
via a softmax. Each encoder level is one 3x3 "same" convolution followed
by a leaky rectifier and 2x2 max pooling; the decoder mirrors it with
nearest-neighbor upsampling, skip concatenation, a 3x3 convolution and an
scSE gate; a final 1x1 convolution produces the two logits.

All convolutions use zero padding. Channel widths double per encoder
level starting from ``base_channels``; decoder level i emits
max(base_channels, enc_channels[i] // 2) channels. The parameter count of
this layout is available in closed form from ``expected_param_count``.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Grid

CHECKPOINT_MAGIC = b"SCRB"
CHECKPOINT_VERSION = 1

LEAKY_SLOPE = 0.1


@dataclass
class ModelConfig:
    base_channels: int = 8
    depth: int = 3
    scse_enabled: bool = True
    input_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def encoder_channels(self):
        return [self.base_channels << i for i in range(self.depth)]

    @property
    def decoder_channels(self):
        return [max(self.base_channels, c // 2) for c in self.encoder_channels]

    @property
    def divisor(self):
        return 1 << self.depth


class ModelParams:
    """Named registry of trainable weight Grids with declared shapes."""

    def __init__(self, config):
        self.config = config
        self._store = OrderedDict()

    def register(self, name, values):
        if name in self._store:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._store[name] = nm.variable(values)

    def __getitem__(self, name):
        return self._store[name]

    def __contains__(self, name):
        return name in self._store

    def names(self):
        return list(self._store)

    def grids(self):
        return self._store.items()

    def parameter_count(self):
        return sum(g.size for g in self._store.values())

    def copy_values(self):
        return {name: g.to_numpy() for name, g in self._store.items()}


def _conv_names(level, kind):
    return f"{kind}{level}.w", f"{kind}{level}.b"


def _scse_names(level):
    base = f"dec{level}.scse"
    return (
        f"{base}.ch_squeeze.w",
        f"{base}.ch_squeeze.b",
        f"{base}.ch_excite.w",
        f"{base}.ch_excite.b",
        f"{base}.spatial.w",
        f"{base}.spatial.b",
    )


def _layer_plan(config):
    """Yield (name, shape) for every parameter, in registry order."""
    plan = []
    prev = config.input_channels
    for i, ch in enumerate(config.encoder_channels):
        wn, bn = _conv_names(i, "enc")
        plan.append((wn, (ch, prev, 3, 3)))
        plan.append((bn, (ch,)))
        prev = ch
    bott = config.encoder_channels[-1]
    plan.append(("bottleneck.w", (bott, bott, 3, 3)))
    plan.append(("bottleneck.b", (bott,)))
    prev = bott
    for i in reversed(range(config.depth)):
        out = config.decoder_channels[i]
        wn, bn = _conv_names(i, "dec")
        plan.append((wn, (out, prev + config.encoder_channels[i], 3, 3)))
        plan.append((bn, (out,)))
        if config.scse_enabled:
            mid = max(1, out // 2)
            cs_w, cs_b, ce_w, ce_b, sp_w, sp_b = _scse_names(i)
            plan.append((cs_w, (mid, out, 1, 1)))
            plan.append((cs_b, (mid,)))
            plan.append((ce_w, (out, mid, 1, 1)))
            plan.append((ce_b, (out,)))
            plan.append((sp_w, (1, out, 1, 1)))
            plan.append((sp_b, (1,)))
        prev = out
    plan.append(("final.w", (2, config.decoder_channels[0], 1, 1)))
    plan.append(("final.b", (2,)))
    return plan


def expected_param_count(config):
    """Closed-form parameter count of the layout built by ``init_params``."""
    return sum(int(np.prod(shape)) for _, shape in _layer_plan(config))


def init_params(config, rng):
    """Kaiming-style fan-in scaled uniform init for kernels, zero biases.

    Kernel entries are drawn from U(-s, s) with s = sqrt(6 / fan_in);
    deterministic given the RngState.
    """
    params = ModelParams(config)
    for name, shape in _layer_plan(config):
        if name.endswith(".b"):
            params.register(name, np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params.register(name, rng.uniform(-bound, bound, size=shape))
    return params


def _lrelu(x):
    return nm.maximum(x, nm.mul(x, LEAKY_SLOPE))


def _conv_block(x, params, wname, bname, padding=1):
    y = nm.conv2d(x, params[wname], stride=1, padding=padding)
    return nm.add_channel_bias(y, params[bname])


def scse(features, block):
    """Concurrent spatial and channel squeeze-excitation gate.

    ``block`` maps the six parameter roles (ch_squeeze.w/b, ch_excite.w/b,
    spatial.w/b) to Grids. The channel branch pools globally, passes a
    two-layer bottleneck (reduction 2) and gates each channel; the spatial
    branch gates each pixel through a 1x1 convolution. The two gated maps
    combine by elementwise maximum.
    """
    pooled = nm.global_avg_pool(features)
    squeezed = _lrelu(
        nm.add_channel_bias(nm.conv2d(pooled, block["ch_squeeze.w"]), block["ch_squeeze.b"])
    )
    ch_gate = nm.sigmoid(
        nm.add_channel_bias(nm.conv2d(squeezed, block["ch_excite.w"]), block["ch_excite.b"])
    )
    sp_gate = nm.sigmoid(
        nm.add_channel_bias(nm.conv2d(features, block["spatial.w"]), block["spatial.b"])
    )
    return nm.maximum(nm.mul(features, ch_gate), nm.mul(features, sp_gate))


def _scse_block(params, level):
    names = _scse_names(level)
    roles = ("ch_squeeze.w", "ch_squeeze.b", "ch_excite.w", "ch_excite.b", "spatial.w", "spatial.b")
    return {role: params[name] for role, name in zip(roles, names)}


def forward(params, image):
    """Predict the (2, H, W) probability map for a (C, H, W) image.

    Channel 0 is the target map; channels sum to 1 at every pixel. H and
    W must be divisible by 2^depth.
    """
    config = params.config
    if image.ndim != 3:
        raise ValueError(f"forward expects a (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    if c != config.input_channels:
        raise ValueError(f"model expects {config.input_channels} input channels, got {c}")
    div = config.divisor
    if h % div or w % div:
        raise ValueError(f"spatial extents must be divisible by {div}, got {h}x{w}")

    x = nm.reshape(image, (1, c, h, w))
    skips = []
    for i in range(config.depth):
        x = _lrelu(_conv_block(x, params, *_conv_names(i, "enc")))
        skips.append(x)
        x = nm.maxpool2(x)
    x = _lrelu(_conv_block(x, params, "bottleneck.w", "bottleneck.b"))
    for i in reversed(range(config.depth)):
        x = nm.concat_channels([nm.upsample_nearest2(x), skips[i]])
        x = _lrelu(_conv_block(x, params, *_conv_names(i, "dec")))
        if config.scse_enabled:
            x = scse(x, _scse_block(params, i))
    logits = nm.add_channel_bias(nm.conv2d(x, params["final.w"]), params["final.b"])
    probs = nm.softmax_channels(logits)
    return nm.reshape(probs, (2, h, w))


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Byte layout: magic "SCRB", version as little-endian u16, then entries
# until EOF, each entry being
#   u16 name length | name bytes (UTF-8) | u8 rank | rank * u32 extents |
#   prod(extents) * f32 values (little-endian).


def write_entries(fh, entries):
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<H", CHECKPOINT_VERSION))
    for name, values in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(values, dtype="<f4")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_entries(fh):
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    entries = OrderedDict()
    while True:
        head = fh.read(2)
        if not head:
            break
        (name_len,) = struct.unpack("<H", head)
        name = fh.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
        entries[name] = data
    return entries


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        write_entries(fh, ((name, g.data) for name, g in params.grids()))


def config_from_entries(entries):
    """Reconstruct the ModelConfig implied by a checkpoint's entry shapes."""
    if "enc0.w" not in entries or "final.w" not in entries:
        raise ValueError("checkpoint lacks the expected layer entries (enc0.w, final.w)")
    base, input_channels = entries["enc0.w"].shape[0], entries["enc0.w"].shape[1]
    depth = sum(1 for name in entries if name.startswith("enc") and name.endswith(".w"))
    scse_enabled = any(".scse." in name for name in entries)
    return ModelConfig(base_channels=base, depth=depth, scse_enabled=scse_enabled, input_channels=input_channels)


def load_checkpoint(path, config=None):
    with open(path, "rb") as fh:
        entries = read_entries(fh)
    if config is None:
        config = config_from_entries(entries)
    params = ModelParams(config)
    plan = _layer_plan(config)
    missing = [name for name, _ in plan if name not in entries]
    extra = [name for name in entries if name not in {n for n, _ in plan}]
    bad_shape = [
        f"{name}: file {entries[name].shape} vs model {shape}"
        for name, shape in plan
        if name in entries and entries[name].shape != shape
    ]
    if missing or extra or bad_shape:
        problems = "; ".join(
            filter(None, [
                f"missing entries: {missing}" if missing else "",
                f"unexpected entries: {extra}" if extra else "",
                f"shape mismatches: {bad_shape}" if bad_shape else "",
            ])
        )
        raise ValueError(f"checkpoint does not match the model layout: {problems}")
    for name, _ in plan:
        params.register(name, entries[name])
    return params
