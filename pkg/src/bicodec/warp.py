"""Backwarping and bi-directional mask fusion.

A flow field is a [B,2,H,W] tensor of per-pixel displacements in pixels:
channel 0 moves along x (width), channel 1 along y (height).  Backwarping
samples a reference frame at grid + flow, so a zero flow reproduces the
reference exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FUSION_EPS = 1e-6


def identity_grid(bsz: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Absolute pixel coordinates [B,2,H,W]: channel 0 = x, channel 1 = y."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys]), (bsz, 2, h, w))


def backwarp(reference: Tensor, flow: Tensor) -> Tensor:
    """Sample reference at (x + flow_x, y + flow_y) with border clamping."""
    reference = reference if isinstance(reference, Tensor) else Tensor(reference)
    flow = flow if isinstance(flow, Tensor) else Tensor(flow)
    bsz, _, h, w = reference.shape
    if flow.shape[0] != bsz or flow.shape[1] != 2 or flow.shape[2:] != (h, w):
        raise ValueError(f"backwarp: flow shape {flow.shape} does not match frames [{bsz},2,{h},{w}]")
    grid = identity_grid(bsz, h, w, dtype=reference.dtype)
    return ad.bilinear_sample(reference, flow + Tensor(grid))


def fuse_bidirectional(warped_past: Tensor, warped_future: Tensor, m1: Tensor, m2: Tensor) -> Tensor:
    """Normalized mask blend of the two warped predictions.

    out = m1/(m1+m2) * warped_past + m2/(m1+m2) * warped_future, with the
    denominator stabilized by a small epsilon.  Masks must be nonnegative
    [B,1,H,W], so the output is a pixel-wise convex combination.
    """
    for name, t in (("warped_past", warped_past), ("warped_future", warped_future), ("m1", m1), ("m2", m2)):
        if not isinstance(t, Tensor):
            raise ValueError(f"fuse_bidirectional: {name} must be a Tensor")
    if warped_past.shape != warped_future.shape:
        raise ValueError(
            f"fuse_bidirectional: frame shapes differ: {warped_past.shape} vs {warped_future.shape}"
        )
    if m1.shape != m2.shape or m1.shape[1] != 1 or m1.shape[2:] != warped_past.shape[2:]:
        raise ValueError(f"fuse_bidirectional: masks must be [B,1,H,W], got {m1.shape} and {m2.shape}")
    if np.any(m1.data < 0.0) or np.any(m2.data < 0.0):
        raise ValueError("fuse_bidirectional: masks must be nonnegative")
    denom = m1 + m2 + FUSION_EPS
    return (m1 / denom) * warped_past + (m2 / denom) * warped_future
