"""Checkpoint files: a plain-text manifest followed by raw float32 data.

Layout (also documented in the README):

    blockswap-checkpoint v1
    depth <int>
    width <int>
    classes <int>
    config <comma-separated block tokens>
    tensor <name> <d0>x<d1>x... <byte offset into payload>
    ...
    end
    <payload: concatenated little-endian float32 tensors>

The manifest is ASCII, one record per line, terminated by the line "end";
everything after that newline is payload. Tensors appear in network
parameter order and offsets are strictly increasing.
"""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError, ConfigError
from .network import Network, NetworkConfig

MAGIC = "blockswap-checkpoint v1"


def save_checkpoint(path, net: Network):
    header = [MAGIC,
              f"depth {net.config.depth}",
              f"width {net.config.width}",
              f"classes {net.config.num_classes}",
              f"config {net.config.config_string()}"]
    payload = bytearray()
    for name, p in net.params.items():
        shape = "x".join(str(d) for d in p.data.shape)
        header.append(f"tensor {name} {shape} {len(payload)}")
        payload.extend(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    header.append("end")
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii") + b"\n")
        f.write(bytes(payload))


def load_checkpoint(path):
    """Returns (NetworkConfig, dict of name -> float32 array)."""
    with open(path, "rb") as f:
        blob = f.read()

    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: manifest has no 'end' line")
        line = blob[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)

    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    fields = {}
    tensor_specs = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "tensor":
            try:
                name, shape_text, offset_text = rest.rsplit(" ", 2)
                shape = tuple(int(d) for d in shape_text.split("x"))
                tensor_specs.append((name, shape, int(offset_text)))
            except ValueError as e:
                raise CheckpointError(f"{path}: bad tensor line {line!r}") from e
        elif key in ("depth", "width", "classes", "config"):
            fields[key] = rest
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")
    missing = {"depth", "width", "classes", "config"} - fields.keys()
    if missing:
        raise CheckpointError(f"{path}: manifest missing {sorted(missing)}")

    try:
        config = NetworkConfig.from_string(fields["config"], int(fields["depth"]),
                                           int(fields["width"]), int(fields["classes"]))
    except (ConfigError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid network description: {e}") from e

    payload = blob[pos:]
    tensors = {}
    for name, shape, offset in tensor_specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} exceeds payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                      offset=offset).reshape(shape).copy()
    return config, tensors


def restore_network(path) -> Network:
    """Rebuild the network a checkpoint describes and load its weights."""
    config, tensors = load_checkpoint(path)
    net = Network(config, np.random.default_rng(0))
    expected = set(net.params)
    if expected != set(tensors):
        extra = sorted(set(tensors) - expected)[:3]
        missing = sorted(expected - set(tensors))[:3]
        raise CheckpointError(
            f"{path}: tensor names do not match the config "
            f"(missing {missing}, unexpected {extra})")
    for name, p in net.params.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"config requires {p.data.shape}")
        p.data = tensors[name]
    return net
