"""Gain and inverse-gain units for flexible-rate coding.

Each latent bottleneck owns a :class:`GainSet`: one gain vector and one
independently learned inverse-gain vector per rate level, stored as
unconstrained parameters mapped through exp() so they stay strictly
positive.  Scaling a latent channel-wise before rounding changes the
effective quantization bin size, which is what moves the rate.

Levels are indexed with the Lagrange multipliers in ascending order, so
level 0 is the lowest-rate point.  Intermediate points interpolate an
adjacent pair (n, n+1) geometrically: fraction 1 is the higher-quality
endpoint n+1 and fraction 0 is endpoint n.  A convenient scalar view is
``quality = pair + frac`` in [0, levels-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

QUALITY_STEP = 0.33  # per-hierarchy-level drop of the interpolation coefficient


@dataclass(frozen=True)
class LevelCoefficient:
    """Rate point between trained levels ``pair`` and ``pair + 1``."""

    pair: int
    frac: float

    def __post_init__(self):
        if not 0.0 <= self.frac <= 1.0:
            raise ValueError(f"fraction must be in [0,1], got {self.frac}")
        if self.pair < 0:
            raise ValueError(f"pair index must be >= 0, got {self.pair}")

    @property
    def quality(self) -> float:
        return self.pair + self.frac


def coeff_from_quality(q: float, levels: int) -> LevelCoefficient:
    """Clamp a scalar quality to [0, levels-1] and split into (pair, frac)."""
    q = min(max(q, 0.0), float(levels - 1))
    pair = min(int(np.floor(q)), levels - 2)
    return LevelCoefficient(pair, q - pair)


class GainSet:
    """Per-level gain and inverse-gain vectors for one bottleneck."""

    def __init__(self, levels: int, channels: int, lo: float = 1.0, hi: float = 8.0, dtype=np.float64):
        if levels < 2:
            raise ValueError("a GainSet needs at least 2 levels to interpolate")
        self.levels = levels
        self.channels = channels
        # geometric ladder lo..hi so rate points start out ordered
        ladder = np.geomspace(lo, hi, levels)
        self.raw_gain = ad.parameter(np.log(np.tile(ladder[:, None], (1, channels))), dtype=dtype)
        self.raw_inverse_gain = ad.parameter(np.log(np.tile((1.0 / ladder)[:, None], (1, channels))), dtype=dtype)

    def parameters(self, prefix: str) -> dict:
        return {prefix + ".gain": self.raw_gain, prefix + ".igain": self.raw_inverse_gain}

    def level_vectors(self, n: int) -> tuple[Tensor, Tensor]:
        """Differentiable (gain, inverse gain) at trained level n."""
        if not 0 <= n < self.levels:
            raise ValueError(f"level {n} outside 0..{self.levels - 1}")
        return ad.exp(self.raw_gain[n]), ad.exp(self.raw_inverse_gain[n])


def apply_gain(latent: Tensor, gain_vec: Tensor) -> Tensor:
    """Multiply channel c of a [B,C,h,w] latent by gain_vec[c]."""
    if gain_vec.shape != (latent.shape[1],):
        raise ValueError(f"gain length {gain_vec.shape} does not match {latent.shape[1]} channels")
    return latent * gain_vec.reshape(1, -1, 1, 1)


def apply_inverse_gain(quantized: Tensor, inverse_gain_vec: Tensor) -> Tensor:
    """Channel-wise rescale after decoding; learned, not tied to 1/gain."""
    if inverse_gain_vec.shape != (quantized.shape[1],):
        raise ValueError(
            f"inverse gain length {inverse_gain_vec.shape} does not match {quantized.shape[1]} channels"
        )
    return quantized * inverse_gain_vec.reshape(1, -1, 1, 1)


def quantize(latent: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Round at inference; add U(-0.5,0.5) as the differentiable train proxy."""
    if mode == "inference":
        return ad.round_half_away(latent)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        return ad.add_uniform_noise(latent, rng)
    raise ValueError(f"unknown quantization mode {mode!r}")


def interpolate_gain(gainset: GainSet, coeff: LevelCoefficient) -> tuple[Tensor, Tensor]:
    """Geometric blend v1^l * v2^(1-l) of the adjacent level pair.

    Fraction 1 returns level pair+1 and fraction 0 returns level pair,
    bitwise identical to the stored vectors.  Differentiable through the
    raw parameters.
    """
    n = coeff.pair
    if n > gainset.levels - 2:
        raise ValueError(f"pair {n} needs levels {n + 1} and {n + 2}, gainset has {gainset.levels}")
    if not np.all(np.isfinite(gainset.raw_gain.data)) or not np.all(np.isfinite(gainset.raw_inverse_gain.data)):
        raise ValueError("gain parameters are not finite")
    l = float(coeff.frac)
    if l == 0.0:
        return gainset.level_vectors(n)
    if l == 1.0:
        return gainset.level_vectors(n + 1)
    g = ad.exp(gainset.raw_gain[n + 1] * l + gainset.raw_gain[n] * (1.0 - l))
    ig = ad.exp(gainset.raw_inverse_gain[n + 1] * l + gainset.raw_inverse_gain[n] * (1.0 - l))
    return g, ig


def level_schedule(base: LevelCoefficient, hierarchy_levels: int, num_trained: int = 4) -> list[LevelCoefficient]:
    """Quality coefficient per hierarchy level, deepest levels cheapest.

    Level 1 keeps the base coefficient; every deeper level subtracts 0.33
    from the running coefficient.  Dropping below a pair boundary continues
    on the next-lower adjacent pair (fraction wraps by +1), clamped at the
    lowest trained level.
    """
    if hierarchy_levels < 1:
        raise ValueError("hierarchy_levels must be >= 1")
    out = [base]
    q = base.quality
    for _ in range(hierarchy_levels - 1):
        q = q - QUALITY_STEP
        out.append(coeff_from_quality(q, num_trained))
    return out
