"""Rejection sampling of block configurations under a parameter budget.

Each candidate draws one grid entry per block position, uniformly and
independently, and is kept iff its closed-form parameter total fits the
budget. No network is ever instantiated here. Candidate i has its own RNG
stream seeded by (master_seed, i), so a candidate's identity does not
depend on how many proposals earlier candidates burned, and downstream
consumers may evaluate candidates in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as bc
from .errors import BudgetError, ConfigError
from .network import NetworkConfig, config_params, skeleton_positions

# sampling aborts if a full window of proposals accepts at a rate below 1e-4
WINDOW = 10 ** 6
MIN_WINDOW_ACCEPTS = 100


@dataclass(frozen=True)
class BudgetSpec:
    max_params: int
    num_samples: int = 1000
    master_seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.max_params < 1:
            raise ConfigError(f"max_params must be >= 1, got {self.max_params}")


def position_grids(skeleton: NetworkConfig):
    """Per-position option tuples for the skeleton's shape sequence."""
    return tuple(bc.candidate_grid(n_out, n_in, stride)
                 for n_in, n_out, stride in skeleton_positions(skeleton.depth, skeleton.width))


def fixed_params(skeleton: NetworkConfig) -> int:
    """Parameters outside the block choices: stem, head BN, classifier."""
    return config_params(skeleton) - sum(bc.block_params(d).params for d in skeleton.blocks)


def min_feasible_params(skeleton: NetworkConfig) -> int:
    """Cost of the config taking the cheapest grid entry at every position."""
    return fixed_params(skeleton) + sum(
        min(bc.block_params(d).params for d in grid) for grid in position_grids(skeleton))


def sample_candidates(skeleton: NetworkConfig, budget: BudgetSpec):
    """Draw exactly budget.num_samples configs with params <= max_params.

    Deterministic in budget.master_seed. Duplicates across candidates are
    allowed; rejection redraws within a candidate's own stream.
    """
    floor = min_feasible_params(skeleton)
    if budget.max_params < floor:
        raise BudgetError(
            f"budget infeasible or too tight: max_params {budget.max_params} is below "
            f"the cheapest config ({floor} params)")

    grids = position_grids(skeleton)
    lens = np.array([len(g) for g in grids])
    # padded (positions, max_grid_len) cost table; the pad value can never
    # be selected because draws are bounded by each row's true length
    cost_table = np.zeros((len(grids), int(lens.max())), dtype=np.int64)
    for i, grid in enumerate(grids):
        cost_table[i, :len(grid)] = [bc.block_params(d).params for d in grid]
    base = fixed_params(skeleton)
    rows = np.arange(len(grids))

    out = []
    window_proposals = 0
    window_accepts = 0
    for cand in range(budget.num_samples):
        rng = np.random.default_rng([budget.master_seed, cand])
        while True:
            idx = rng.integers(0, lens)
            window_proposals += 1
            accepted = base + int(cost_table[rows, idx].sum()) <= budget.max_params
            if accepted:
                window_accepts += 1
            if window_proposals >= WINDOW:
                if window_accepts < MIN_WINDOW_ACCEPTS:
                    raise BudgetError(
                        f"budget infeasible or too tight: {window_accepts} acceptances "
                        f"in {window_proposals} proposals")
                window_proposals = 0
                window_accepts = 0
            if accepted:
                break
        blocks = tuple(grid[j] for grid, j in zip(grids, idx))
        out.append(NetworkConfig(skeleton.depth, skeleton.width,
                                 skeleton.num_classes, blocks))
    return out
