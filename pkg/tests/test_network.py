"""Skeleton layout, closed-form accounting vs instantiation, forward contract."""

import numpy as np
import pytest

from blockswap.blocks import candidate_grid
from blockswap.errors import ConfigError
from blockswap.network import (
    Network,
    NetworkConfig,
    build,
    config_macs,
    config_params,
    skeleton_positions,
)


def random_config(depth, width, rng, num_classes=10):
    tokens = []
    for n_in, n_out, stride in skeleton_positions(depth, width):
        grid = candidate_grid(n_out, n_in=n_in, stride=stride)
        tokens.append(grid[rng.integers(len(grid))].token())
    return NetworkConfig.from_string(",".join(tokens), depth, width, num_classes)


class TestSkeleton:
    def test_positions_16_1(self):
        assert skeleton_positions(16, 1) == (
            (16, 16, 1), (16, 16, 1),
            (16, 32, 2), (32, 32, 1),
            (32, 64, 2), (64, 64, 1),
        )

    def test_positions_40_2(self):
        pos = skeleton_positions(40, 2)
        assert len(pos) == 18
        assert pos[0] == (16, 32, 1)
        assert pos[6] == (32, 64, 2)
        assert pos[12] == (64, 128, 2)
        assert pos[17] == (128, 128, 1)
        assert sum(1 for p in pos if p[2] == 2) == 2

    def test_bad_depths(self):
        for depth in (15, 8, 12, 0):
            with pytest.raises(ConfigError):
                skeleton_positions(depth, 1)
        with pytest.raises(ConfigError):
            skeleton_positions(16, 0)

    def test_config_validation(self):
        uniform = NetworkConfig.uniform(depth=16, width=1)
        with pytest.raises(ConfigError, match="expects 6"):
            NetworkConfig(16, 1, 10, uniform.blocks[:4])
        # a descriptor whose stride disagrees with its position, named by index
        bad = uniform.blocks[:2] + (uniform.blocks[3],) + uniform.blocks[3:]
        with pytest.raises(ConfigError, match="block 2"):
            NetworkConfig(16, 1, 10, bad)
        with pytest.raises(ConfigError):
            NetworkConfig.uniform(num_classes=1)

    def test_replace_block(self):
        cfg = NetworkConfig.uniform(depth=16, width=1)
        swapped = cfg.replace_block(3, "G4")
        assert swapped.config_string() == "S,S,S,G4,S,S"
        assert cfg.config_string() == "S,S,S,S,S,S"
        with pytest.raises(ConfigError):
            cfg.replace_block(6, "S")

    def test_config_string_round_trip(self):
        text = "B2,S,G4,BG2_2,G2,B4"
        cfg = NetworkConfig.from_string(text, 16, 1, 10)
        assert cfg.config_string() == text


class TestAccounting:
    def test_published_totals(self):
        assert config_params(NetworkConfig.uniform(40, 2)) == 2243546
        assert config_params(NetworkConfig.uniform(16, 1)) == 175066
        assert config_params(NetworkConfig.uniform(16, 2)) == 691674

    def test_formula_equals_instantiation(self):
        rng = np.random.default_rng(7)
        configs = [NetworkConfig.uniform(16, 1), NetworkConfig.uniform(10, 2)]
        configs += [random_config(16, 1, rng) for _ in range(6)]
        configs += [random_config(10, 2, rng) for _ in range(4)]
        for cfg in configs:
            net = Network(cfg, rng)
            assert net.parameter_count() == config_params(cfg), cfg.config_string()

    def test_macs_hand_example(self):
        # depth 10 width 1 at 8x8: stem 27648, stage blocks 294912 + 229376
        # + 229376 (maps 8 -> 4 -> 2), head linear 640
        cfg = NetworkConfig.uniform(10, 1)
        assert config_macs(cfg, 8) == 781952

    def test_macs_input_floor(self):
        with pytest.raises(ConfigError):
            config_macs(NetworkConfig.uniform(10, 1), 7)


class TestForward:
    def small_net(self, seed=0, token="S"):
        cfg = NetworkConfig.uniform(depth=10, width=1, token=token)
        return Network(cfg, np.random.default_rng(seed)), cfg

    def test_shapes(self):
        net, cfg = self.small_net()
        x = np.random.default_rng(1).normal(size=(4, 3, 16, 16)).astype(np.float32)
        out = net.forward(x)
        assert out.logits.data.shape == (4, 10)
        assert len(out.probes) == 3
        assert [p.data.shape for p in out.probes] == [
            (4, 16, 16, 16), (4, 32, 8, 8), (4, 64, 4, 4)]
        assert [m.data.shape for m in out.attention] == [
            (4, 256), (4, 64), (4, 16)]

    def test_rejects_bad_input(self):
        net, _ = self.small_net()
        with pytest.raises(ConfigError):
            net.forward(np.zeros((2, 1, 16, 16), dtype=np.float32))
        with pytest.raises(ConfigError):
            net.forward(np.zeros((3, 16, 16), dtype=np.float32))

    def test_probe_is_last_conv_output(self):
        # kill the final conv of block 1: its probe must go silent while the
        # residual path keeps the logits alive
        net, _ = self.small_net()
        net.params["block1.conv1.w"].data[:] = 0
        x = np.random.default_rng(2).normal(size=(2, 3, 16, 16)).astype(np.float32)
        out = net.forward(x)
        assert np.all(out.probes[1].data == 0)
        assert np.any(out.probes[0].data != 0)
        assert np.any(out.logits.data != 0)

    def test_init_determinism(self):
        a, _ = self.small_net(seed=11)
        b, _ = self.small_net(seed=11)
        c, _ = self.small_net(seed=12)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data)
                   for n in a.params)

    def test_forward_determinism(self):
        net, _ = self.small_net(seed=3, token="G2")
        x = np.random.default_rng(4).normal(size=(2, 3, 16, 16)).astype(np.float32)
        one = net.forward(x).logits.data
        two = net.forward(x).logits.data
        assert np.array_equal(one, two)

    def test_mixed_config_trains_end_to_end(self):
        cfg = NetworkConfig.from_string("B2,G4,BG2_2,S,G2,B4", 16, 1, 10)
        net = build(cfg, np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(2, 3, 16, 16)).astype(np.float32)
        out = net.forward(x)
        assert out.logits.data.shape == (2, 10)
        assert len(out.probes) == 6

    def test_zero_grad(self):
        from blockswap.engine import backward, softmax_cross_entropy
        net, _ = self.small_net()
        x = np.random.default_rng(7).normal(size=(2, 3, 16, 16)).astype(np.float32)
        loss = softmax_cross_entropy(net.forward(x).logits, np.array([0, 1]))
        backward(loss)
        assert net.params["stem.w"].grad is not None
        net.zero_grad()
        assert all(p.grad is None for p in net.parameters)
