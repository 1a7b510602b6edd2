"""Counter-based Gaussian noise keyed by ``(seed, trajectory, step)``.

Each trajectory owns a Philox bit generator whose key is ``(seed, trajectory)``;
the step index is written into the second counter word before every draw, so the
noise for a given step never depends on how many draws happened before it, on
the batch size, or on the order in which trajectories are visited.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(seed: int, trajectory: int) -> np.ndarray:
    return np.array([seed & _MASK64, trajectory & _MASK64], dtype=np.uint64)


class TrajectoryStream:
    """Noise source for one trajectory."""

    __slots__ = ("seed", "trajectory", "_bitgen", "_gen")

    def __init__(self, seed: int, trajectory: int):
        self.seed = int(seed)
        self.trajectory = int(trajectory)
        self._bitgen = np.random.Philox(key=_key(self.seed, self.trajectory))
        self._gen = np.random.Generator(self._bitgen)

    def normal(self, step: int, dim: int) -> np.ndarray:
        state = self._bitgen.state
        state["state"]["counter"] = np.array([0, step, 0, 0], dtype=np.uint64)
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        self._bitgen.state = state
        return self._gen.standard_normal(dim)


def make_streams(seed: int, trajectory_ids) -> list[TrajectoryStream]:
    return [TrajectoryStream(seed, int(b)) for b in trajectory_ids]


def batch_normal(streams, step: int, dim: int) -> np.ndarray:
    """Stack one ``dim``-vector of noise per stream for ``step``."""
    out = np.empty((len(streams), dim))
    for i, stream in enumerate(streams):
        out[i] = stream.normal(step, dim)
    return out


def prior_draw(streams, dim: int) -> np.ndarray:
    """Initial ``X_1 ~ N(0, I)``; uses a step slot no sampling step can reach."""
    return batch_normal(streams, _MASK64, dim)
