"""Synthetic methylation datasets with known per-site states.

Every site carries one state per sample (hypo, hemi or hyper); each patient
then gets an independent beta draw from that state's distribution.  Sites
are generated in fixed blocks, each block with its own Philox counter
stream, so the output depends only on the seed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .betamath import ShapePair
from .errors import ConfigError
from .model import MethylationMatrix

STATES = ("hypo", "hemi", "hyper")
SITE_BLOCK = 1024


def _default_shapes():
    return {"hypo": ShapePair(2.0, 20.0), "hemi": ShapePair(4.0, 3.0), "hyper": ShapePair(20.0, 2.0)}


@dataclass(frozen=True)
class SimConfig:
    C: int = 20_000
    N: int = 4
    R: int = 2
    state_shapes: dict = field(default_factory=_default_shapes)
    state_probs: tuple = (0.35, 0.35, 0.30)
    joint_mode: str = "independent"  # or "explicit"
    joint_table: tuple | None = None  # M**R probabilities, first sample varies slowest
    seed: int = 0

    def __post_init__(self):
        if min(self.C, self.N, self.R) < 1:
            raise ConfigError("C, N and R must be positive")
        shapes = {str(k): v if isinstance(v, ShapePair) else ShapePair(*v)
                  for k, v in self.state_shapes.items()}
        object.__setattr__(self, "state_shapes", shapes)
        probs = np.asarray(self.state_probs, dtype=float)
        if probs.shape != (len(shapes),):
            raise ConfigError(f"need one probability per state ({len(shapes)}), got {probs.size}")
        if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, rtol=0, atol=1e-9):
            raise ConfigError("state probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "state_probs", tuple(float(p) for p in probs))
        if self.joint_mode not in ("independent", "explicit"):
            raise ConfigError("joint_mode must be 'independent' or 'explicit'")
        if self.joint_mode == "explicit":
            table = np.asarray(self.joint_table, dtype=float) if self.joint_table is not None else None
            if table is None or table.shape != (len(shapes) ** self.R,):
                raise ConfigError(f"explicit joint mode needs {len(shapes) ** self.R} probabilities")
            if np.any(table < 0) or not np.isclose(table.sum(), 1.0, rtol=0, atol=1e-9):
                raise ConfigError("joint table must be non-negative and sum to 1")
            object.__setattr__(self, "joint_table", tuple(float(p) for p in table))

    @property
    def state_names(self) -> tuple:
        return tuple(self.state_shapes)

    def joint_probs(self) -> np.ndarray:
        """Probability of each joint state combination, first sample slowest."""
        if self.joint_mode == "explicit":
            return np.asarray(self.joint_table)
        probs = np.asarray(self.state_probs)
        out = np.ones(1)
        for _ in range(self.R):
            out = np.outer(out, probs).ravel()
        return out


@dataclass(frozen=True)
class SimulatedData:
    matrix: MethylationMatrix
    states: np.ndarray  # (C, R) state indices into config.state_names
    joint: np.ndarray  # (C,) index of the joint combination
    config: SimConfig

    def state_labels(self, r: int = 0) -> np.ndarray:
        return np.asarray(self.config.state_names)[self.states[:, r]]

    def joint_labels(self) -> list:
        names = self.config.state_names
        return ["-".join(names[s] for s in row) for row in self.states]


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, block]))


def simulate(config: SimConfig) -> SimulatedData:
    """Generate one dataset; bit-identical for a given config and seed."""
    C, N, R = config.C, config.N, config.R
    M = len(config.state_names)
    probs = config.joint_probs()
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    a = np.array([s.alpha for s in config.state_shapes.values()])
    d = np.array([s.delta for s in config.state_shapes.values()])
    radix = M ** np.arange(R - 1, -1, -1)

    values = np.empty((C, N, R))
    joint = np.empty(C, dtype=np.int64)
    for block, start in enumerate(range(0, C, SITE_BLOCK)):
        stop = min(start + SITE_BLOCK, C)
        rng = _block_rng(config.seed, block)
        u = rng.random(stop - start)
        joint[start:stop] = np.searchsorted(cdf, u, side="right")
        st = (joint[start:stop, None] // radix) % M
        shape_a = np.broadcast_to(a[st][:, None, :], (stop - start, N, R))
        shape_d = np.broadcast_to(d[st][:, None, :], (stop - start, N, R))
        g1 = rng.standard_gamma(shape_a)
        g2 = rng.standard_gamma(shape_d)
        values[start:stop] = g1 / (g1 + g2)
    states = (joint[:, None] // radix) % M

    ids = [f"cg{i + 1:07d}" for i in range(C)]
    samples = [chr(ord("A") + r) if r < 26 else str(r + 1) for r in range(R)]
    matrix = MethylationMatrix(values, ids, [str(n + 1) for n in range(N)], samples)
    return SimulatedData(matrix, states, joint, config)


def true_thresholds(config: SimConfig):
    """Density-ratio crossings of the generating single-sample mixture."""
    from .thresholds import mixture_thresholds

    names = config.state_names
    if len(names) < 2:
        from .errors import ThresholdUndefinedError

        raise ThresholdUndefinedError("a single-state configuration has no thresholds")
    a = np.array([config.state_shapes[n].alpha for n in names])
    d = np.array([config.state_shapes[n].delta for n in names])
    return mixture_thresholds(np.asarray(config.state_probs), a, d, scope="global")


def all_joint_names(config: SimConfig) -> list:
    return ["-".join(c) for c in itertools.product(config.state_names, repeat=config.R)]
