"""
The trainable segmenter, stage-1 training and the gradient-check harness.

`SegModel` holds a three-block convolutional backbone, a segmentation head
producing `C` softmax masks, a residual head producing per-channel flow
corrections bounded by `lam` pixels and the two `VectorMLP` maps of the
flow-pooling pathway. Stage 1 fits the masks by reconstructing the input
flow from them (see `pyRCF.motion`).
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union, TYPE_CHECKING

import logging
import math
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pandas import DataFrame

from pyRCF.config import TrainConfig
from pyRCF.datagen import FramePairDataset, Frame
from pyRCF.errors import ConfigError, DivergenceError, ShapeError
from pyRCF.motion import VectorMLP, motion_loss, predicted_flow
from pyRCF.nn_ops import ConvBlock, as_tensor, check_grid

if TYPE_CHECKING:
    from pyRCF.checkpoint import Checkpoint

logger = logging.getLogger(__name__)

FrameLike = Union[Frame, np.ndarray, torch.Tensor]


class SegModel(nn.Module):
    """Desk-scale segmenter with a bounded residual flow head.

    The backbone runs three Conv-BN-ReLU blocks (strides 1, 2, 2), so its
    last block lives on a grid four times coarser than the input. The
    segmentation head resizes that block to the first block's grid,
    concatenates both and maps them to `C` logits. The residual head reads
    the concatenated last-block features of two frames through two
    Conv-BN-ReLU blocks and a plain output convolution (tanh follows it, so
    it carries no normalization). The tanh output is bilinearly upsampled to
    the input grid and scaled by `lam`; with `symmetric` it predicts both
    directions (4C channels).

    Args:
        config (TrainConfig): channel counts, `lam`, `res_init_scale`,
            `residual_pathway` and `symmetric_loss` are read from it.
        input_size (tuple): (height, width) of the frames; both must be
            multiples of 4.
    """

    def __init__(self, config: TrainConfig, input_size: Tuple[int, int] = (64, 64)):
        super().__init__()
        height, width = int(input_size[0]), int(input_size[1])
        if height % 4 or width % 4:
            raise ConfigError(f"'input_size' {input_size} must be a multiple of 4!")
        self.input_size = (height, width)
        self.channels = config.channels
        self.lam = float(config.lam)
        self.pathway = config.residual_pathway
        self.symmetric = bool(config.symmetric_loss)
        K, w = config.feature_channels, config.head_width

        self.block1 = ConvBlock(3, 16)
        self.block2 = ConvBlock(16, 32, stride=2)
        self.block3 = ConvBlock(32, K, stride=2)
        self.seg_head = nn.Sequential(ConvBlock(16 + K, w), ConvBlock(w, w), nn.Conv2d(w, self.channels, kernel_size=1))
        self.directions = 2 if self.symmetric else 1
        self.res_head = nn.Sequential(
            ConvBlock(2 * K, w), ConvBlock(w, w),
            nn.Conv2d(w, self.directions * self.channels * 2, kernel_size=3, padding=1),
        )
        with torch.no_grad():
            self.res_head[-1].weight.mul_(config.res_init_scale)
            self.res_head[-1].bias.mul_(config.res_init_scale)
        self.phi1 = VectorMLP(config.mlp_hidden)
        self.phi2 = VectorMLP(config.mlp_hidden)

    def _frames(self, I: FrameLike) -> torch.Tensor:
        if isinstance(I, Frame):
            I = I.chw()
        x = as_tensor(I, torch.float32) if not isinstance(I, torch.Tensor) else I
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"frames must have shape (B, 3, H, W), got {tuple(x.shape)}!")
        if tuple(x.shape[-2:]) != self.input_size:
            raise ShapeError(f"frames are {tuple(x.shape[-2:])}, the model expects {self.input_size}!")
        return x.to(self.block1[0].weight.dtype)

    def features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the first-block and last-block feature maps."""
        f1 = self.block1((x - 0.5) / 0.25)
        f3 = self.block3(self.block2(f1))
        return f1, f3

    def mask_logits(self, f1: torch.Tensor, f3: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(f3, size=f1.shape[-2:], mode='bilinear', align_corners=False)
        return self.seg_head(torch.cat([f1, up], dim=1))

    def residuals(self, f3_t: torch.Tensor, f3_t1: torch.Tensor) -> torch.Tensor:
        """Bounded residuals (B, directions, C, 2, H, W) for the pair (t, t + 1).

        tanh rounds to exactly +-1 in float32 for large inputs, so the unit
        range is pulled in by one ulp before scaling; every component stays
        strictly inside (-lam, lam).
        """
        raw = self.res_head(torch.cat([f3_t, f3_t1], dim=1))
        up = F.interpolate(torch.tanh(raw), size=self.input_size, mode='bilinear', align_corners=False)
        edge = 1.0 - torch.finfo(up.dtype).eps
        bounded = self.lam * up.clamp(-edge, edge)
        return bounded.reshape(up.shape[0], self.directions, self.channels, 2, *self.input_size)

    def forward(self, I_t: FrameLike, I_t1: Optional[FrameLike] = None) -> Dict[str, torch.Tensor]:
        """Masks of `I_t` and, when `I_t1` is given, the residuals of the pair."""
        x_t = self._frames(I_t)
        if I_t1 is None:
            f1, f3 = self.features(x_t)
            return {'masks': torch.softmax(self.mask_logits(f1, f3), dim=1)}
        x_t1 = self._frames(I_t1)
        f1, f3 = self.features(torch.cat([x_t, x_t1]))
        B = x_t.shape[0]
        logits = self.mask_logits(f1, f3)
        return {
            'masks': torch.softmax(logits[:B], dim=1),
            'masks_t1': torch.softmax(logits[B:], dim=1),
            'residuals': self.residuals(f3[:B], f3[B:]),
        }

    @torch.no_grad()
    def predict(self, frames: Sequence[FrameLike], batch: int = 16) -> torch.Tensor:
        """Eval-mode masks (N, C, H, W) for a list of frames, in input order."""
        was_training = self.training
        self.eval()
        try:
            out = [self(torch.cat([self._frames(I) for I in frames[i:i + batch]]))['masks']
                   for i in range(0, len(frames), batch)]
        finally:
            self.train(was_training)
        if not out:
            return torch.zeros(0, self.channels, *self.input_size)
        return torch.cat(out)


def forward_masks(model: SegModel, I: FrameLike) -> torch.Tensor:
    """Soft masks (C, H, W) of one frame (or (B, C, H, W) of a batch).

    Raises:
        ShapeError: if the frame grid differs from the model's input size.
    """
    masks = model(I)['masks']
    return masks[0] if _is_single(I) else masks


def forward_residual(model: SegModel, I_t: FrameLike, I_t1: FrameLike) -> torch.Tensor:
    """Forward-direction residuals (C, 2, H, W), every value in (-lam, lam)."""
    R = model(I_t, I_t1)['residuals'][:, 0]
    return R[0] if _is_single(I_t) else R


def _is_single(I: FrameLike) -> bool:
    return isinstance(I, Frame) or (not isinstance(I, Frame) and I.ndim == 3)


# ======== Stage 1 ========

def poly_lr(step: int, total: int, lr: float, min_lr: float, power: float = 0.9) -> float:
    """Polynomial decay from `lr` at step 0 towards `min(min_lr, lr)` at step `total`.

    Examples:
        >>> poly_lr(0, 100, 1e-4, 1e-6)
        0.0001
        >>> poly_lr(100, 100, 1e-4, 1e-6)
        1e-06
    """
    floor = min(min_lr, lr)
    if total <= 0:
        return lr
    progress = min(max(step / total, 0.0), 1.0)
    return (lr - floor) * (1.0 - progress) ** power + floor


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8,
                            weight_decay=config.weight_decay)


def batch_indices(n: int, batch: int, seed: int) -> Iterator[List[int]]:
    """Endless seeded shuffling: yields `batch` indices at a time, reshuffling after every pass."""
    assert n >= 1, "'n' must be positive!"
    generator = torch.Generator().manual_seed(seed)
    pending: List[int] = []
    while True:
        while len(pending) < batch:
            pending.extend(torch.randperm(n, generator=generator).tolist())
        yield pending[:batch]
        pending = pending[batch:]


def to_tensors(raw: Dict[str, object]) -> Dict[str, Optional[torch.Tensor]]:
    """Converts a `FramePairDataset.batch` dict into float32 tensors."""
    out = {key: torch.from_numpy(raw[key]) for key in ('frame_t', 'frame_t1', 'flow')}
    out['backward_flow'] = torch.from_numpy(raw['backward_flow']) if raw.get('backward_flow') is not None else None
    return out


def stage1_loss(model: SegModel, batch: Dict[str, Optional[torch.Tensor]], symmetric: bool = False,
                outputs: Optional[Dict[str, torch.Tensor]] = None) -> torch.Tensor:
    """Flow reconstruction loss of a batch of frame pairs.

    With `symmetric`, the reversed pair (t + 1 -> t) is added when the batch
    carries a backward flow; the symmetric model reads its reversed
    residuals from the second half of the residual head, otherwise the
    reversed pair is fitted without residual.

    Raises:
        ShapeError: if the flow grid differs from the frame grid.
    """
    flow = batch['flow']
    check_grid(flow, batch['frame_t'], 'flow', 'frame_t')
    if outputs is None:
        outputs = model(batch['frame_t'], batch['frame_t1'])
    flow = flow.to(outputs['masks'].dtype)
    R = outputs['residuals']
    F_hat = predicted_flow(flow, outputs['masks'], R[:, 0], model.lam, model.phi1, model.phi2, model.pathway)
    loss = motion_loss(F_hat, flow)
    backward = batch.get('backward_flow')
    if symmetric and backward is not None:
        backward = backward.to(flow.dtype)
        R_b = R[:, 1] if model.directions == 2 else None
        B_hat = predicted_flow(backward, outputs['masks_t1'], R_b, model.lam, model.phi1, model.phi2, model.pathway)
        loss = loss + motion_loss(B_hat, backward)
    return loss


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group['lr'] = lr


def apply_loss(optimizer: torch.optim.Optimizer, loss: torch.Tensor, stage: str, step: int,
               recent: Sequence[float] = ()) -> float:
    """Backpropagates `loss` and steps `optimizer`; a non-finite loss raises `DivergenceError` instead."""
    value = float(loss.detach())
    if not math.isfinite(value):
        logger.error("%s diverged at step %d (loss=%r)", stage, step, value)
        raise DivergenceError(stage, step, value, list(recent)[-5:])
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return value


def stage1_step(model: SegModel, batch: Dict[str, Optional[torch.Tensor]], optimizer: torch.optim.Optimizer,
                config: TrainConfig, step: int = 0, recent: Sequence[float] = ()) -> float:
    """One stage-1 optimizer step at the polynomially decayed learning rate.

    Returns:
        float: the loss before the update.

    Raises:
        DivergenceError: if the loss is not finite; the parameters are left untouched.
    """
    model.train()
    set_lr(optimizer, poly_lr(step, config.steps_stage1, config.lr, config.min_lr, config.poly_power))
    loss = stage1_loss(model, batch, config.symmetric_loss)
    return apply_loss(optimizer, loss, 'stage1', step, recent)


def train_stage1(dataset: FramePairDataset, config: TrainConfig) -> Checkpoint:
    """Trains a fresh `SegModel` on the frame pairs of `dataset`.

    Runs `config.steps_stage1` steps over seeded shuffles of the pairs. The
    returned checkpoint's EMA weights equal the final parameters.

    Raises:
        ConfigError: if the dataset holds no frame pair.
        DivergenceError: if the loss becomes non-finite.
    """
    from pyRCF.checkpoint import Checkpoint

    if len(dataset) == 0:
        raise ConfigError("the training dataset must contain at least one frame pair!")
    torch.manual_seed(config.seed)
    model = SegModel(config, dataset.grid)
    optimizer = make_optimizer(model, config)
    sampler = batch_indices(len(dataset), config.batch, config.seed)
    rows, losses = [], []
    logger.info("stage1: %d steps on %d pairs (C=%d, lam=%g)", config.steps_stage1, len(dataset),
                config.channels, config.lam)
    for step in range(config.steps_stage1):
        batch = to_tensors(dataset.batch(next(sampler)))
        try:
            loss = stage1_step(model, batch, optimizer, config, step, losses)
        except DivergenceError as e:
            e.history = DataFrame(rows, columns=HISTORY_COLUMNS)
            raise
        losses.append(loss)
        rows.append({'stage': 'stage1', 'step': step, 'loss': loss, 'lr': optimizer.param_groups[0]['lr']})
        if (step + 1) % config.log_every == 0:
            logger.info("stage1 step %d/%d loss=%.4f lr=%.2e", step + 1, config.steps_stage1, loss,
                        optimizer.param_groups[0]['lr'])
    model.eval()
    ema = EMA(model, config.ema_momentum)
    ema.register()
    return Checkpoint(model=model, config=config, ema_state=ema.shadow, optimizer_state=optimizer.state_dict(),
                      step=config.steps_stage1, history=DataFrame(rows, columns=HISTORY_COLUMNS))


HISTORY_COLUMNS = ['stage', 'step', 'loss', 'lr']


# ======== EMA ========

def ema_update(ema_params: Dict[str, torch.Tensor], params: Dict[str, torch.Tensor], m: float) -> Dict[str, torch.Tensor]:
    """Returns `m * ema + (1 - m) * params` for every named tensor.

    Raises:
        ShapeError: if the names or shapes of the two dicts differ.

    Examples:
        >>> ema_update({'w': torch.tensor(2.)}, {'w': torch.tensor(4.)}, 0.5)['w'].item()
        3.0
    """
    assert 0.0 <= m <= 1.0, "'m' must be in the [0, 1] interval!"
    if ema_params.keys() != params.keys():
        raise ShapeError("'ema_params' and 'params' must hold the same names!")
    out = {}
    for name, shadow in ema_params.items():
        value = params[name].detach()
        if shadow.shape != value.shape:
            raise ShapeError(f"'{name}' has shape {tuple(shadow.shape)} in the EMA and {tuple(value.shape)} in the model!")
        if m == 1.0:
            out[name] = shadow.clone()
        elif m == 0.0:
            out[name] = value.clone()
        else:
            out[name] = m * shadow + (1.0 - m) * value
    return out


class EMA:
    """Shadow copy of a model's trainable parameters.

    `apply_shadow` swaps the averaged weights in (to run the averaged model)
    and `restore` swaps the live weights back.
    """

    def __init__(self, model: nn.Module, decay: float, shadow: Optional[Dict[str, torch.Tensor]] = None):
        self.model = model
        self.decay = decay
        self.shadow = {name: t.clone() for name, t in shadow.items()} if shadow is not None else {}
        self.backup: Dict[str, torch.Tensor] = {}

    def _params(self) -> Dict[str, torch.Tensor]:
        return {name: p for name, p in self.model.named_parameters() if p.requires_grad}

    def register(self) -> None:
        self.shadow = {name: p.detach().clone() for name, p in self._params().items()}

    def update(self) -> None:
        self.shadow = ema_update(self.shadow, self._params(), self.decay)

    def apply_shadow(self) -> None:
        for name, p in self._params().items():
            self.backup[name] = p.data
            p.data = self.shadow[name].clone()

    def restore(self) -> None:
        for name, p in self._params().items():
            p.data = self.backup[name]
        self.backup = {}


# ======== Gradient check ========

@dataclass
class GradCheckReport:
    """Worst disagreement between analytic and central-difference gradients."""

    max_abs_error: float
    max_rel_error: float
    n_checked: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-4,
               floor: float = 1e-6, max_checks: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compares autograd gradients of `loss_fn()` with central finite differences.

    The loss is evaluated at the current values of `params` (leaf float64
    tensors with `requires_grad`). Each checked coordinate is perturbed by
    `+-step` in place and restored afterwards. The relative error of a
    coordinate is `|a - n| / max(|a|, |n|, floor)`.

    Args:
        loss_fn: closure returning a scalar tensor built from `params`.
        params: tensors to differentiate with respect to.
        step (float): finite-difference step.
        floor (float): lower bound of the relative-error denominator.
        max_checks (int): when given, only this many coordinates are
            checked, drawn with `seed`.

    Returns:
        GradCheckReport: maximum absolute and relative errors.

    Raises:
        ValueError: if the loss or a gradient is not finite.

    Examples:
        >>> x = torch.randn(5, dtype=torch.float64, requires_grad=True)
        >>> grad_check(lambda: (x ** 2).sum(), [x]).passed(1e-6)
        True
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise ValueError(f"'loss_fn' must be finite at the checked point, got {loss.item()!r}!")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    if not all(torch.isfinite(g).all() for g in grads):
        raise ValueError("the analytic gradient is not finite!")

    coordinates = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if max_checks is not None and max_checks < len(coordinates):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coordinates), size=max_checks, replace=False)
        coordinates = [coordinates[k] for k in sorted(picked)]

    max_abs = max_rel = 0.0
    with torch.no_grad():
        for i, j in coordinates:
            flat = params[i].view(-1)
            original = flat[j].item()
            flat[j] = original + step
            plus = loss_fn().item()
            flat[j] = original - step
            minus = loss_fn().item()
            flat[j] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise ValueError("the loss is not finite around the checked point!")
            numeric = (plus - minus) / (2.0 * step)
            analytic = grads[i].view(-1)[j].item()
            err = abs(analytic - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(analytic), abs(numeric), floor))
    return GradCheckReport(max_abs_error=max_abs, max_rel_error=max_rel, n_checked=len(coordinates))
