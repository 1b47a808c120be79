"""Block families, their closed-form costs, and the per-position option grid.

Four residual block families over a channel pair (n_in, n_out):

  S        two 3x3 convs (the standard WideResNet block)
  G(g)     grouped 3x3 + pointwise 1x1, twice
  B(b)     bottleneck: 1x1 down to M = n_out/b, 3x3 at M, 1x1 back up
  BG(b,g)  bottleneck with the middle 3x3 grouped

Every conv is preceded by BN+ReLU (pre-activation); the spatial 3x3 conv
carries the block's stride. A 1x1 shortcut conv (no BN) is added exactly
when stride != 1 or n_in != n_out. Costs here are pure arithmetic: the
instantiated network must agree with them element for element, and tests
enforce that equality, so keep this module free of any layer-building code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConfigError

KERNEL = 3

_TOKEN_RE = re.compile(r"^(?:S|G(\d+)|BG(\d+)_(\d+)|B(\d+))$")


@dataclass(frozen=True)
class BlockDescriptor:
    """One block choice bound to its skeleton position."""

    kind: str
    n_in: int
    n_out: int
    stride: int = 1
    g: int = 1
    b: int = 1

    def __post_init__(self):
        if self.kind not in ("S", "G", "B", "BG"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError(f"channel counts must be >= 1, got {self.n_in}->{self.n_out}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.g < 1 or self.b < 1:
            raise ConfigError(f"g and b must be >= 1, got g={self.g}, b={self.b}")
        if self.kind == "S":
            if self.g != 1 or self.b != 1:
                raise ConfigError("S takes no g or b")
        elif self.kind == "G":
            if self.b != 1:
                raise ConfigError("G takes no b")
            if self.n_in % self.g or self.n_out % self.g:
                raise ConfigError(
                    f"G group count {self.g} must divide channels {self.n_in} and {self.n_out}")
        elif self.kind == "B":
            if self.g != 1:
                raise ConfigError("B takes no g")
            if self.b not in (2, 4):
                raise ConfigError(f"B contraction must be 2 or 4, got {self.b}")
            if self.n_out % self.b:
                raise ConfigError(f"B contraction {self.b} must divide n_out {self.n_out}")
        else:
            if self.b != 2:
                raise ConfigError(f"BG contraction is fixed at 2, got {self.b}")
            if self.n_out % self.b:
                raise ConfigError(f"BG contraction {self.b} must divide n_out {self.n_out}")
            if (self.n_out // self.b) % self.g:
                raise ConfigError(
                    f"BG group count {self.g} must divide bottleneck width {self.n_out // self.b}")

    @property
    def mid(self):
        """Bottleneck width M; only meaningful for B and BG."""
        return self.n_out // self.b

    @property
    def has_shortcut_conv(self):
        return self.stride != 1 or self.n_in != self.n_out

    def token(self):
        if self.kind == "S":
            return "S"
        if self.kind == "G":
            return f"G{self.g}"
        if self.kind == "B":
            return f"B{self.b}"
        return f"BG{self.b}_{self.g}"

    @classmethod
    def from_token(cls, token, n_in, n_out, stride=1):
        m = _TOKEN_RE.match(token)
        if not m:
            raise ConfigError(f"unparseable block token {token!r}")
        g_grp, bg_b, bg_g, b_grp = m.groups()
        if token == "S":
            return cls("S", n_in, n_out, stride)
        if g_grp is not None:
            return cls("G", n_in, n_out, stride, g=int(g_grp))
        if bg_b is not None:
            return cls("BG", n_in, n_out, stride, g=int(bg_g), b=int(bg_b))
        return cls("B", n_in, n_out, stride, b=int(b_grp))


@dataclass(frozen=True)
class CostBreakdown:
    conv_params: int
    bn_params: int
    shortcut_params: int
    macs: int = 0

    @property
    def params(self):
        return self.conv_params + self.bn_params + self.shortcut_params


def _out_hw(hw, stride):
    # both 3x3/pad-1 and 1x1/pad-0 convs map h -> (h - 1)//s + 1
    return (hw - 1) // stride + 1


def block_params(d: BlockDescriptor, input_hw=None) -> CostBreakdown:
    """Exact weight-element counts for one block; MACs if input_hw is given.

    Conv cost is out_ch * (in_ch / groups) * k^2 per constituent conv, BN
    cost is 2 * channels-normalized, the shortcut is a bias-free 1x1 conv
    of n_in * n_out weights. MACs count one multiply-add per weight use at
    every output position; BN/ReLU/pool are excluded.
    """
    k2 = KERNEL * KERNEL
    n_in, n_out, g, b = d.n_in, d.n_out, d.g, d.b
    if d.kind == "S":
        conv = k2 * n_in * n_out + k2 * n_out * n_out
        bn = 2 * n_in + 2 * n_out
    elif d.kind == "G":
        conv = (k2 * (n_in // g) * n_out + n_out * n_out
                + k2 * (n_out // g) * n_out + n_out * n_out)
        bn = 2 * n_in + 6 * n_out
    elif d.kind == "B":
        m = n_out // b
        conv = n_in * m + k2 * m * m + m * n_out
        bn = 2 * n_in + 4 * m
    else:
        m = n_out // b
        conv = n_in * m + k2 * (m // g) * m + m * n_out
        bn = 2 * n_in + 4 * m
    shortcut = n_in * n_out if d.has_shortcut_conv else 0

    macs = 0
    if input_hw is not None:
        macs = block_macs(d, input_hw)
    return CostBreakdown(conv, bn, shortcut, macs)


def block_macs(d: BlockDescriptor, input_hw) -> int:
    """Multiply-accumulate count of one block at a square input size."""
    if input_hw < 1:
        raise ConfigError(f"input size must be >= 1, got {input_hw}")
    k2 = KERNEL * KERNEL
    n_in, n_out, g, b = d.n_in, d.n_out, d.g, d.b
    full = input_hw * input_hw
    strided = _out_hw(input_hw, d.stride) ** 2
    if d.kind == "S":
        macs = n_out * strided * n_in * k2 + n_out * strided * n_out * k2
    elif d.kind == "G":
        macs = (n_out * strided * (n_in // g) * k2 + n_out * strided * n_out
                + n_out * strided * (n_out // g) * k2 + n_out * strided * n_out)
    elif d.kind == "B":
        m = n_out // b
        macs = m * full * n_in + m * strided * m * k2 + n_out * strided * m
    else:
        m = n_out // b
        macs = m * full * n_in + m * strided * (m // g) * k2 + n_out * strided * m
    if d.has_shortcut_conv:
        macs += n_out * strided * n_in
    return macs


def candidate_grid(n_out, n_in=None, stride=1):
    """All block choices available at a position with the given shape.

    The group-count menu for G is {2, 4, 8, 16} plus {N/16, N/8, N/4, N/2, N}
    with N = n_out; BG uses the same menu built from M = N/2. Entries that
    are fractional, below 1, or that fail a divisibility rule are dropped,
    and duplicates collapse. Order is deterministic: S, then B by b, then G
    and BG by ascending group count.
    """
    if n_out < 16 or n_out % 16:
        raise ConfigError(f"grid is defined for widths that are multiples of 16, got {n_out}")
    if n_in is None:
        n_in = n_out

    def try_make(kind, **kw):
        try:
            return BlockDescriptor(kind, n_in, n_out, stride, **kw)
        except ConfigError:
            return None

    def group_menu(base):
        fixed = [2, 4, 8, 16]
        derived = [base // 16, base // 8, base // 4, base // 2, base]
        derived = [v for v, rem in zip(derived, (base % 16, base % 8, base % 4, base % 2, 0))
                   if rem == 0]
        return sorted({v for v in fixed + derived if v >= 1})

    out = [BlockDescriptor("S", n_in, n_out, stride)]
    for b in (2, 4):
        d = try_make("B", b=b)
        if d is not None:
            out.append(d)
    for g in group_menu(n_out):
        d = try_make("G", g=g)
        if d is not None:
            out.append(d)
    for g in group_menu(n_out // 2):
        d = try_make("BG", b=2, g=g)
        if d is not None:
            out.append(d)

    seen = set()
    unique = []
    for d in out:
        if d.token() not in seen:
            seen.add(d.token())
            unique.append(d)
    return tuple(unique)


def parse_config_string(text, positions):
    """Comma-separated block tokens -> descriptors bound to skeleton positions.

    ``positions`` is the skeleton's (n_in, n_out, stride) sequence; the
    token count must match it exactly.
    """
    tokens = text.strip().split(",")
    if len(tokens) != len(positions):
        raise ConfigError(
            f"config has {len(tokens)} blocks, skeleton expects {len(positions)}")
    blocks = []
    for i, (token, (n_in, n_out, stride)) in enumerate(zip(tokens, positions)):
        try:
            blocks.append(BlockDescriptor.from_token(token, n_in, n_out, stride))
        except ConfigError as e:
            raise ConfigError(f"block {i}: {e}") from e
    return tuple(blocks)


def format_config_string(blocks):
    return ",".join(d.token() for d in blocks)
