"""
Flow reconstruction from soft masks.

The piecewise-constant pathway pools the flow under every mask channel and
broadcasts the pooled vectors back; the residual pathway adds a per-pixel
correction bounded by `lam` pixels. Every function is written with torch
operations so that gradients with respect to masks, flows, MLP parameters
and residuals are available through autograd.

Shapes use trailing dimensions, so a leading batch dimension is optional:\n
- flow `F`: (..., 2, H, W), channel 0 is u and channel 1 is v;
- mask stack `M`: (..., C, H, W), summing to 1 over C;
- pooled flows `P`: (..., C, 2);
- residual stack `R`: (..., C, 2, H, W).
"""

from __future__ import annotations
from enum import Enum, member
from typing import Callable, Optional

import torch
import torch.nn as nn

from pyRCF.errors import ConfigError, ShapeError
from pyRCF.nn_ops import as_tensor, check_grid

EPS_POOL = 1e-12

VectorMap = Callable[[torch.Tensor], torch.Tensor]


def _check_flow(F: torch.Tensor, name: str = 'F') -> None:
    if F.dim() < 3 or F.shape[-3] != 2:
        raise ShapeError(f"'{name}' must have shape (..., 2, H, W), got {tuple(F.shape)}!")


def _check_masks(M: torch.Tensor, name: str = 'M') -> None:
    if M.dim() < 3:
        raise ShapeError(f"'{name}' must have shape (..., C, H, W), got {tuple(M.shape)}!")


def _channels_last(F: torch.Tensor) -> torch.Tensor:
    return F.movedim(-3, -1)


def _channels_first(F: torch.Tensor) -> torch.Tensor:
    return F.movedim(-1, -3)


class VectorMLP(nn.Module):
    """Two-layer MLP acting on 2-vectors: `v + W2 act(W1 v + b1) + b2`.

    The skip connection and the 0.1 scaling of the output layer make the
    freshly initialized map close to the identity, so early training behaves
    like plain pooling. The same weights are applied to every vector (every
    pixel, every channel).

    Args:
        hidden (int): hidden width.
        activation (nn.Module): elementwise nonlinearity, ReLU by default.
        output_scale (float): multiplier on the default initialization of
            the output layer.
    """

    def __init__(self, hidden: int = 16, activation: Optional[nn.Module] = None, output_scale: float = 0.1):
        super().__init__()
        assert hidden >= 1, "'hidden' must be a positive integer!"
        self.fc1 = nn.Linear(2, hidden)
        self.act = activation if activation is not None else nn.ReLU()
        self.fc2 = nn.Linear(hidden, 2)
        with torch.no_grad():
            self.fc2.weight.mul_(output_scale)
            self.fc2.bias.mul_(output_scale)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        """Maps vectors stored in the last dimension (..., 2)."""
        return v + self.fc2(self.act(self.fc1(v)))

    def pixelwise(self, F: torch.Tensor) -> torch.Tensor:
        """Maps every pixel vector of a flow field (..., 2, H, W)."""
        return _channels_first(self(_channels_last(F)))


def guided_pool(F: torch.Tensor, M_c: torch.Tensor, eps: float = EPS_POOL) -> torch.Tensor:
    """Mask-weighted mean of a flow field.

    Args:
        F (Tensor): flow field (..., 2, H, W).
        M_c (Tensor): single-channel soft mask (..., H, W) with values in [0, 1].
        eps (float): guard added to the mask area.

    Returns:
        Tensor: the pooled vector (..., 2); an all-zero mask pools to (0, 0).

    Raises:
        ShapeError: if `F` and `M_c` are not on the same grid.

    Examples:
        >>> F = torch.tensor([[[1., 3.], [5., 7.]], [[0., 0.], [0., 0.]]])
        >>> guided_pool(F, torch.tensor([[1., 0.], [0., 1.]])).tolist()
        [4.0, 0.0]
    """
    F, M_c = as_tensor(F), as_tensor(M_c)
    _check_flow(F)
    check_grid(F, M_c, 'F', 'M_c')
    weighted = (F * M_c.unsqueeze(-3)).sum(dim=(-2, -1))
    return weighted / (M_c.sum(dim=(-2, -1)) + eps).unsqueeze(-1)


def pooled_flows(F: torch.Tensor, M: torch.Tensor, phi1: Optional[VectorMap] = None,
                 phi2: Optional[VectorMap] = None, eps: float = EPS_POOL) -> torch.Tensor:
    """Pools the (transformed) flow under every mask channel.

    `P_c = phi2(guided_pool(phi1(F), M_c))`, with `phi1` applied to every
    pixel vector and `phi2` to every pooled vector. `None` stands for the
    identity.

    Args:
        F (Tensor): flow field (..., 2, H, W).
        M (Tensor): mask stack (..., C, H, W).
        phi1, phi2: maps on vectors stored in the last dimension, such as
            `VectorMLP` instances.

    Returns:
        Tensor: pooled flows (..., C, 2).
    """
    F, M = as_tensor(F), as_tensor(M)
    _check_flow(F)
    _check_masks(M)
    check_grid(F, M, 'F', 'M')
    if phi1 is not None:
        F = _channels_first(phi1(_channels_last(F)))
    weighted = (F.unsqueeze(-4) * M.unsqueeze(-3)).sum(dim=(-2, -1))
    P = weighted / (M.sum(dim=(-2, -1)) + eps).unsqueeze(-1)
    if phi2 is not None:
        P = phi2(P)
    return P


def broadcast(P: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Piecewise-constant flow `sum_c P_c * M_c`, returned as (..., 2, H, W).

    Raises:
        ShapeError: if `P` does not hold one 2-vector per mask channel.
    """
    P, M = as_tensor(P), as_tensor(M)
    _check_masks(M)
    if P.dim() < 2 or P.shape[-1] != 2 or P.shape[-2] != M.shape[-3]:
        raise ShapeError(f"'P' {tuple(P.shape)} must hold one 2-vector per channel of 'M' {tuple(M.shape)}!")
    return (P[..., None, None] * M.unsqueeze(-3)).sum(dim=-4)


def residual_compose(R: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Aggregated residual `sum_c R_c * M_c`, returned as (..., 2, H, W).

    Since the masks sum to one, the result inherits the `(-lam, lam)` bound
    of the per-channel residuals.
    """
    R, M = as_tensor(R), as_tensor(M)
    _check_masks(M)
    if R.dim() < 4 or R.shape[-3] != 2 or R.shape[-4] != M.shape[-3]:
        raise ShapeError(f"'R' {tuple(R.shape)} must hold one residual field per channel of 'M' {tuple(M.shape)}!")
    check_grid(R, M, 'R', 'M')
    return (R * M.unsqueeze(-3)).sum(dim=-4)


def reconstruct(P_hat: torch.Tensor, R_hat: torch.Tensor) -> torch.Tensor:
    """Final flow prediction `P_hat + R_hat`."""
    P_hat, R_hat = as_tensor(P_hat), as_tensor(R_hat)
    _check_flow(P_hat, 'P_hat')
    _check_flow(R_hat, 'R_hat')
    check_grid(P_hat, R_hat, 'P_hat', 'R_hat')
    return P_hat + R_hat


def motion_loss(F_hat: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """Mean over pixels (and batch) of the L1 distance between two flow fields.

    Examples:
        >>> motion_loss(torch.tensor([[[1.]], [[2.]]]), torch.zeros(2, 1, 1)).item()
        3.0
    """
    F_hat, F = as_tensor(F_hat), as_tensor(F)
    _check_flow(F_hat, 'F_hat')
    _check_flow(F, 'F')
    if F_hat.shape != F.shape:
        raise ShapeError(f"'F_hat' {tuple(F_hat.shape)} and 'F' {tuple(F.shape)} must have the same shape!")
    return (F_hat - F).abs().sum(dim=-3).mean()


class ResidualPathway(Enum):
    """How the bounded per-pixel head output is combined with the piecewise-constant flow.

    Each member maps `(P_hat, R, M, lam)` to the predicted flow, where
    `P_hat` is the broadcast flow, `R` the per-channel head output (already
    bounded in `(-lam, lam)`) and `M` the mask stack.

    Examples:
        >>> F_hat = ResidualPathway.NONE(P_hat, R, M, 10.0)
        >>> torch.equal(F_hat, P_hat)
        True
    """

    @member
    def RESIDUAL(P_hat: torch.Tensor, R: torch.Tensor, M: torch.Tensor, lam: float) -> torch.Tensor:
        """Additive relaxation: `P_hat + sum_c R_c * M_c`."""
        return reconstruct(P_hat, residual_compose(R, M))

    @member
    def SCALING(P_hat: torch.Tensor, R: torch.Tensor, M: torch.Tensor, lam: float) -> torch.Tensor:
        """Multiplicative relaxation: `P_hat * (1 + S)`, with `S = sum_c (R_c / lam) * M_c` in (-1, 1)."""
        if lam == 0:
            return P_hat
        S = residual_compose(R / lam, M)
        return P_hat * (1.0 + S)

    @member
    def NONE(P_hat: torch.Tensor, R: torch.Tensor, M: torch.Tensor, lam: float) -> torch.Tensor:
        """Plain common fate: the head output is ignored."""
        return P_hat

    @classmethod
    def parse(cls, name: str | ResidualPathway) -> ResidualPathway:
        if isinstance(name, ResidualPathway):
            return name
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown residual pathway '{name}', expected one of {[p.name.lower() for p in cls]}!") from None

    def __call__(self, P_hat: torch.Tensor, R: torch.Tensor, M: torch.Tensor, lam: float) -> torch.Tensor:
        assert lam >= 0.0, "'lam' must be non-negative!"
        return self.value(P_hat, R, M, lam)


def predicted_flow(F: torch.Tensor, M: torch.Tensor, R: Optional[torch.Tensor], lam: float,
                   phi1: Optional[VectorMap] = None, phi2: Optional[VectorMap] = None,
                   pathway: ResidualPathway = ResidualPathway.RESIDUAL) -> torch.Tensor:
    """Full flow reconstruction: pool, broadcast and relax with `pathway`.

    `R = None` or `lam = 0` reduces to the piecewise-constant prediction.
    """
    P = pooled_flows(F, M, phi1, phi2)
    P_hat = broadcast(P, M)
    if R is None or lam == 0:
        return P_hat
    return pathway(P_hat, as_tensor(R), as_tensor(M), lam)
