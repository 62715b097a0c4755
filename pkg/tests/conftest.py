"""Shared fixtures and small builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from swarmtopo.network import NetworkSpec


def chain_network(
    n: int = 4,
    weight: float = 1.0,
    control_period: float = 0.5,
    speed: tuple[float, float] = (0.2, 0.0),
    spacing: float = 2.0,
    interaction_range: float = 5.0,
) -> NetworkSpec:
    """Leader at 0, each robot listens to its predecessor, shape on a line."""
    adjacency = np.zeros((n, n))
    for i in range(1, n):
        adjacency[i, i - 1] = weight
    shape = np.column_stack([-spacing * np.arange(n, dtype=float), np.zeros(n)])
    return NetworkSpec(
        n=n,
        adjacency=adjacency,
        shape=shape,
        leader=0,
        leader_velocity=np.asarray(speed),
        control_period=control_period,
        interaction_range=interaction_range,
        obstacle_range=1.5,
    )


@pytest.fixture
def chain4() -> NetworkSpec:
    return chain_network()


def steady_track(
    n: int,
    c: np.ndarray,
    offsets: np.ndarray,
    frames: int,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Synthetic observations of an exactly steady pattern."""
    steps = np.arange(frames, dtype=float)
    track = offsets[None, :, :] + np.multiply.outer(steps, np.tile(c, (n, 1)))
    if noise is not None:
        track = track + noise
    return track
