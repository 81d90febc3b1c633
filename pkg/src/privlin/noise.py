"""Noise samplers for the two perturbation families used by every mechanism."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Seed specification for one reproducible random stream.

    Identical (seed, stream_id) pairs yield bit-identical sample sequences;
    distinct stream ids give statistically independent streams, so parallel
    trials stay order-independent.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(seq)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def _as_shape(shape) -> tuple[int, int]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape), 1)
    rows, cols = (int(shape[0]), int(shape[1]))
    if rows < 1 or cols < 1:
        raise ValueError(f"noise shape must be positive, got {shape}")
    return rows, cols


def sample_radial_exponential(shape, beta: float, rng) -> np.ndarray:
    """Draw a matrix from the density proportional to exp(-beta * ||B||_F).

    In n = rows * cols dimensions the radial density is proportional to
    r^(n-1) exp(-beta r), i.e. the norm is Gamma(n, rate beta); the sample is
    that radius times an independent uniformly random direction. An int shape
    means a column vector.
    """
    rows, cols = _as_shape(shape)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    rng = as_generator(rng)
    n = rows * cols
    direction = rng.standard_normal(n)
    norm = np.linalg.norm(direction)
    while norm == 0.0:
        direction = rng.standard_normal(n)
        norm = np.linalg.norm(direction)
    radius = rng.gamma(shape=n, scale=1.0 / beta)
    return (radius / norm * direction).reshape(rows, cols)


def sample_gaussian(shape, sigma: float, rng) -> np.ndarray:
    """Draw a matrix of i.i.d. N(0, sigma^2) entries. An int shape means a column vector."""
    rows, cols = _as_shape(shape)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = as_generator(rng)
    return sigma * rng.standard_normal((rows, cols))
