"""Orthonormal 2-D Haar transform on (..., H, W) tensors.

For every 2x2 block [[a, b], [c, d]] one analysis step produces

    ll = (a + b + c + d) / 2
    hl = (a + b - c - d) / 2    # responds to horizontal edges
    lh = (a - b + c - d) / 2    # responds to vertical edges
    hh = (a - b - c + d) / 2    # corners

The 1/2 gain (1/sqrt(2) per axis) makes the transform orthonormal, so energy
is preserved and the inverse is the transpose.
"""
from dataclasses import dataclass, field

import torch

from .errors import DimensionError, ShapeError

SUBBANDS = ("ll", "lh", "hl", "hh")


@dataclass
class SubbandSet:
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.bands()}
        if len(shapes) != 1:
            raise ShapeError(f"subband shapes differ: {sorted(shapes)}")

    def bands(self):
        return [self.ll, self.lh, self.hl, self.hh]

    def items(self):
        return list(zip(SUBBANDS, self.bands()))


@dataclass
class SubbandPyramid:
    level0: torch.Tensor
    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def level(self, i):
        """1-based access matching the recursion index; level(0) is the input."""
        if i == 0:
            return self.level0
        return self.levels[i - 1]


def _check_even(x):
    if x.dim() < 2:
        raise ShapeError(f"expected at least 2 dims (..., H, W), got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2:
        raise DimensionError(f"height must be even for a Haar step, got H={h}")
    if w % 2:
        raise DimensionError(f"width must be even for a Haar step, got W={w}")


def dwt_step(x: torch.Tensor) -> SubbandSet:
    _check_even(x)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return SubbandSet(
        ll=(a + b + c + d) * 0.5,
        lh=(a - b + c - d) * 0.5,
        hl=(a + b - c - d) * 0.5,
        hh=(a - b - c + d) * 0.5,
    )


def idwt_step(s: SubbandSet) -> torch.Tensor:
    ll, lh, hl, hh = s.bands()
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ShapeError("subband shapes differ")
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    *lead, h, w = ll.shape
    out = ll.new_empty(*lead, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def dwt_pyramid(x: torch.Tensor, levels: int) -> SubbandPyramid:
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    divisor = 2 ** levels
    h, w = x.shape[-2:]
    if h % divisor or w % divisor:
        raise DimensionError(
            f"{levels}-level pyramid needs H and W divisible by {divisor}, got {h}x{w}"
        )
    pyr = SubbandPyramid(level0=x)
    cur = x
    for _ in range(levels):
        step = dwt_step(cur)
        pyr.levels.append(step)
        cur = step.ll
    return pyr


def reconstruct(pyr: SubbandPyramid) -> torch.Tensor:
    """Invert a pyramid from its coarsest level using only the stored high-pass bands."""
    if not pyr.levels:
        return pyr.level0
    cur = pyr.levels[-1].ll
    for s in reversed(pyr.levels):
        cur = idwt_step(SubbandSet(cur, s.lh, s.hl, s.hh))
    return cur
