"""
Small tensor helpers shared by the motion, model, refine and tuner modules.
"""

from __future__ import annotations
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from pyRCF.errors import ShapeError

ArrayLike = Union[np.ndarray, torch.Tensor]


def as_tensor(x: ArrayLike, dtype: torch.dtype = None) -> torch.Tensor:
    """Returns `x` as a torch tensor, keeping autograd history when `x` already is one."""
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.from_numpy(np.ascontiguousarray(x))
    if dtype is not None:
        return t.to(dtype)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    return t


def check_grid(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> None:
    """Raises `ShapeError` unless the two tensors share their last two (spatial) dims."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(
            f"'{name_a}' {tuple(a.shape)} and '{name_b}' {tuple(b.shape)} must share the same grid!"
        )


def resize_grid(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Resizes the trailing (H, W) dims of `x` to `size`.

    Shrinking uses area averaging and enlarging uses bilinear interpolation
    (half-pixel centers), so values in [0, 1] stay in [0, 1] either way.
    A matching size returns `x` untouched.
    """
    size = (int(size[0]), int(size[1]))
    if tuple(x.shape[-2:]) == size:
        return x
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    if size[0] <= x.shape[-2] and size[1] <= x.shape[-1]:
        out = F.adaptive_avg_pool2d(flat, size)
    else:
        out = F.interpolate(flat, size=size, mode='bilinear', align_corners=False)
    return out.reshape(*lead, *size)


class ConvBlock(nn.Sequential):
    """Conv-BN-ReLU block: 3x3 convolution, batch normalization, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_channels, momentum=0.1),
            nn.ReLU(inplace=True),
        )
