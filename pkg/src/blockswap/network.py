"""WideResNet skeletons and their instantiation on the autodiff engine.

A network is fixed by (depth, width, num_classes) plus one block descriptor
per residual position. The skeleton is: 3x3 stem conv (3 -> 16), three
stages of (depth - 4)/6 blocks at widths 16w/32w/64w with stride-2 entries
into stages 2 and 3, then BN -> ReLU -> global average pool -> linear.

Instantiated networks expose one probe per block (the output of the
block's last convolution, taken before the residual add) and one
attention map per stage (channel-mean of squared stage outputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as bc
from .blocks import BlockDescriptor
from .engine import (
    Parameter,
    Tensor,
    add,
    attention_map,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    kaiming_init,
    linear,
    relu,
)
from .errors import ConfigError

STEM_CHANNELS = 16


def stage_widths(width):
    return (16 * width, 32 * width, 64 * width)


def skeleton_positions(depth, width):
    """(n_in, n_out, stride) for every block position, in network order."""
    if depth < 10 or (depth - 4) % 6:
        raise ConfigError(f"depth must be 6n+4 with n >= 1, got {depth}")
    if width < 1:
        raise ConfigError(f"width must be >= 1, got {width}")
    per_stage = (depth - 4) // 6
    positions = []
    n_in = STEM_CHANNELS
    for stage, n_out in enumerate(stage_widths(width)):
        stride = 2 if stage > 0 else 1
        positions.append((n_in, n_out, stride))
        positions.extend((n_out, n_out, 1) for _ in range(per_stage - 1))
        n_in = n_out
    return tuple(positions)


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 40
    width: int = 2
    num_classes: int = 10
    blocks: tuple = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        positions = skeleton_positions(self.depth, self.width)
        if len(self.blocks) != len(positions):
            raise ConfigError(
                f"config has {len(self.blocks)} blocks, skeleton expects {len(positions)}")
        for i, (d, pos) in enumerate(zip(self.blocks, positions)):
            if (d.n_in, d.n_out, d.stride) != pos:
                raise ConfigError(
                    f"block {i}: descriptor bound to {(d.n_in, d.n_out, d.stride)}, "
                    f"position requires {pos}")

    @classmethod
    def uniform(cls, depth=40, width=2, num_classes=10, token="S"):
        blocks = tuple(BlockDescriptor.from_token(token, *pos)
                       for pos in skeleton_positions(depth, width))
        return cls(depth, width, num_classes, blocks)

    @classmethod
    def from_string(cls, text, depth, width, num_classes):
        positions = skeleton_positions(depth, width)
        return cls(depth, width, num_classes, bc.parse_config_string(text, positions))

    def config_string(self):
        return bc.format_config_string(self.blocks)

    def replace_block(self, index, token):
        if not 0 <= index < len(self.blocks):
            raise ConfigError(f"block index {index} out of range for {len(self.blocks)} blocks")
        pos = skeleton_positions(self.depth, self.width)[index]
        new = list(self.blocks)
        new[index] = BlockDescriptor.from_token(token, *pos)
        return NetworkConfig(self.depth, self.width, self.num_classes, tuple(new))


def config_params(cfg: NetworkConfig) -> int:
    """Closed-form total parameter count; must equal the instantiated count."""
    final_width = stage_widths(cfg.width)[-1]
    total = 3 * STEM_CHANNELS * bc.KERNEL ** 2
    total += sum(bc.block_params(d).params for d in cfg.blocks)
    total += 2 * final_width
    total += final_width * cfg.num_classes + cfg.num_classes
    return total


def config_macs(cfg: NetworkConfig, input_hw) -> int:
    """Multiply-accumulates of one forward pass at batch size 1."""
    if input_hw < 8:
        raise ConfigError(f"input size must be >= 8, got {input_hw}")
    total = STEM_CHANNELS * input_hw * input_hw * 3 * bc.KERNEL ** 2
    hw = input_hw
    for d in cfg.blocks:
        total += bc.block_macs(d, hw)
        hw = (hw - 1) // d.stride + 1
    total += stage_widths(cfg.width)[-1] * cfg.num_classes
    return total


def _conv_plan(d: BlockDescriptor):
    """Main-path convs as (in_ch, out_ch, k, stride, groups), in order."""
    if d.kind == "S":
        return ((d.n_in, d.n_out, 3, d.stride, 1),
                (d.n_out, d.n_out, 3, 1, 1))
    if d.kind == "G":
        return ((d.n_in, d.n_out, 3, d.stride, d.g),
                (d.n_out, d.n_out, 1, 1, 1),
                (d.n_out, d.n_out, 3, 1, d.g),
                (d.n_out, d.n_out, 1, 1, 1))
    m = d.mid
    return ((d.n_in, m, 1, 1, 1),
            (m, m, 3, d.stride, d.g if d.kind == "BG" else 1),
            (m, d.n_out, 1, 1, 1))


@dataclass
class ForwardResult:
    logits: Tensor
    probes: tuple       # one per block: last-conv output, pre residual add
    attention: tuple    # one per stage: (N, H*W) attention map


class Network:
    """Executable network; parameters persist, the graph is rebuilt per call."""

    def __init__(self, config: NetworkConfig, rng):
        self.config = config
        self.params = {}
        self._build(rng)

    def _add_conv(self, name, cin, cout, k, groups, rng):
        w = kaiming_init((cout, cin // groups, k, k), (cin // groups) * k * k, rng)
        self.params[name + ".w"] = Parameter(w, Parameter.CONV_WEIGHT, name + ".w")

    def _add_bn(self, name, channels):
        self.params[name + ".scale"] = Parameter(
            np.ones(channels, dtype=np.float32), Parameter.BN_SCALE, name + ".scale")
        self.params[name + ".shift"] = Parameter(
            np.zeros(channels, dtype=np.float32), Parameter.BN_SHIFT, name + ".shift")

    def _build(self, rng):
        cfg = self.config
        self._add_conv("stem", 3, STEM_CHANNELS, 3, 1, rng)
        for i, d in enumerate(cfg.blocks):
            for j, (cin, cout, k, _, groups) in enumerate(_conv_plan(d)):
                self._add_bn(f"block{i}.bn{j}", cin)
                self._add_conv(f"block{i}.conv{j}", cin, cout, k, groups, rng)
            if d.has_shortcut_conv:
                self._add_conv(f"block{i}.shortcut", d.n_in, d.n_out, 1, 1, rng)
        final_width = stage_widths(cfg.width)[-1]
        self._add_bn("head.bn", final_width)
        fw = kaiming_init((final_width, cfg.num_classes), final_width, rng)
        self.params["head.fc.w"] = Parameter(fw, Parameter.LINEAR_WEIGHT, "head.fc.w")
        self.params["head.fc.b"] = Parameter(
            np.zeros(cfg.num_classes, dtype=np.float32), Parameter.LINEAR_BIAS, "head.fc.b")

    @property
    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters)

    def zero_grad(self):
        for p in self.parameters:
            p.grad = None

    def _block_forward(self, x, i):
        d = self.config.blocks[i]
        p = self.params
        pre = None
        cur = x
        for j, (_, _, _, stride, groups) in enumerate(_conv_plan(d)):
            a = relu(batchnorm2d(cur, p[f"block{i}.bn{j}.scale"], p[f"block{i}.bn{j}.shift"]))
            if j == 0:
                pre = a
            cur = conv2d(a, p[f"block{i}.conv{j}.w"], stride=stride, groups=groups)
        probe = cur
        probe.capture = True
        # shape-changing shortcuts read the pre-activated input
        short = conv2d(pre, p[f"block{i}.shortcut.w"], stride=d.stride) \
            if d.has_shortcut_conv else x
        return add(cur, short), probe

    def forward(self, images) -> ForwardResult:
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected (N, 3, H, W) images, got shape {images.shape}")
        x = conv2d(Tensor(images), self.params["stem.w"])
        probes = []
        maps = []
        per_stage = (self.config.depth - 4) // 6
        i = 0
        for _ in range(3):
            for _ in range(per_stage):
                x, probe = self._block_forward(x, i)
                probes.append(probe)
                i += 1
            maps.append(attention_map(x))
        x = relu(batchnorm2d(x, self.params["head.bn.scale"], self.params["head.bn.shift"]))
        x = global_avg_pool(x)
        logits = linear(x, self.params["head.fc.w"], self.params["head.fc.b"])
        return ForwardResult(logits, tuple(probes), tuple(maps))


def build(config: NetworkConfig, rng) -> Network:
    return Network(config, rng)
