"""
Appearance refinement of the object mask and the stage-2 training loop.

Two refiners produce supervision targets from a predicted object mask:\n
- `crf_refine`: an exact two-label fully-connected CRF solved by mean-field
  iterations, with a bilateral (position + color) appearance kernel and a
  position-only smoothness kernel under Potts compatibility;
- `ncut_refine`: gradient descent of the normalized cut of a soft
  assignment on the graph given by `affinity` (thresholded cosine
  similarity of feature vectors).

`combine_refinements` multiplies the CRF refinement of the mask with the
CRF refinement of the NCut assignment, which suppresses mask regions whose
appearance features disagree with the object.
"""

from __future__ import annotations
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import logging
import numpy as np
import torch
import torch.nn.functional as F
from pandas import DataFrame, concat

from pyRCF.checkpoint import Checkpoint
from pyRCF.config import CrfParams, TrainConfig
from pyRCF.datagen import FeatureMap, Frame, FramePairDataset
from pyRCF.errors import ConfigError, DivergenceError, ShapeError
from pyRCF.model import (HISTORY_COLUMNS, apply_loss, batch_indices, make_optimizer, poly_lr, set_lr,
                         stage1_loss, to_tensors)
from pyRCF.nn_ops import as_tensor, resize_grid

logger = logging.getLogger(__name__)

EPS_DEN = 1e-8
LOGIT_CLAMP = 1e-4

ImageLike = Union[Frame, np.ndarray, torch.Tensor]
FeaturesLike = Union[FeatureMap, np.ndarray, torch.Tensor]


def _image(frame: ImageLike) -> torch.Tensor:
    """Returns the frame as a float64 (H, W, 3) tensor."""
    if isinstance(frame, Frame):
        frame = frame.data
    image = as_tensor(frame, torch.float64)
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ShapeError(f"'frame' must have shape (H, W, 3), got {tuple(image.shape)}!")
    return image


@lru_cache(maxsize=8)
def _position_sq_dist(height: int, width: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=torch.float64),
                            torch.arange(width, dtype=torch.float64), indexing='ij')
    positions = torch.stack([ys.flatten(), xs.flatten()], dim=1)
    return torch.cdist(positions, positions, compute_mode='donot_use_mm_for_euclid_dist') ** 2


def crf_kernel(image: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Dense pairwise kernel (N, N) over the pixels of an (H, W, 3) image, zero on the diagonal."""
    height, width = image.shape[:2]
    dp = _position_sq_dist(height, width)
    colors = image.reshape(-1, 3)
    dc = torch.cdist(colors, colors, compute_mode='donot_use_mm_for_euclid_dist') ** 2
    kernel = params.w_app_kernel * torch.exp(-dp / (2.0 * params.theta_alpha ** 2) - dc / (2.0 * params.theta_beta ** 2))
    kernel = kernel + params.w_smooth * torch.exp(-dp / (2.0 * params.theta_gamma ** 2))
    kernel.fill_diagonal_(0.0)
    return kernel


def crf_refine(mask: Union[np.ndarray, torch.Tensor], frame: ImageLike, params: Optional[CrfParams] = None) -> torch.Tensor:
    """Refines a soft foreground mask with a two-label dense CRF.

    Unaries are the negative logs of the clamped foreground / background
    probabilities. Every mean-field iteration computes, for both labels,
    the kernel-weighted sum of the current marginals and penalizes each
    label by the message of the other label (Potts), then renormalizes
    per pixel.

    Args:
        mask: foreground probabilities (H, W) in [0, 1].
        frame: the image (H, W, 3) with colors in [0, 1].
        params (CrfParams): kernel parameters, defaults when `None`.

    Returns:
        Tensor: float64 foreground marginals (H, W) in [0, 1].

    Raises:
        ShapeError: if the mask and the frame are not on the same grid.
        ValueError: if the mask has values outside [0, 1].

    Examples:
        >>> flat = CrfParams(w_app_kernel=0.0, w_smooth=0.0)
        >>> round(crf_refine(np.full((4, 4), 0.3), np.zeros((4, 4, 3)), flat)[0, 0].item(), 6)
        0.3
    """
    params = params if params is not None else CrfParams()
    m = as_tensor(mask, torch.float64).detach()
    image = _image(frame).detach()
    if m.dim() != 2 or tuple(m.shape) != tuple(image.shape[:2]):
        raise ShapeError(f"'mask' {tuple(m.shape)} and 'frame' {tuple(image.shape)} must share the same grid!")
    if m.numel() and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("'mask' values must be in the [0, 1] interval!")
    p = m.flatten().clamp(params.unary_eps, 1.0 - params.unary_eps)
    unary = torch.stack([-torch.log1p(-p), -torch.log(p)], dim=1)  # (N, 2): background, foreground
    Q = torch.softmax(-unary, dim=1)
    if params.w_app_kernel == 0.0 and params.w_smooth == 0.0:
        return Q[:, 1].reshape(m.shape)
    kernel = crf_kernel(image, params)
    for _ in range(params.iterations):
        messages = kernel @ Q
        Q = torch.softmax(-(unary + messages.flip(1)), dim=1)
    return Q[:, 1].reshape(m.shape)


def _features(features: FeaturesLike) -> torch.Tensor:
    if isinstance(features, FeatureMap):
        features = features.data
    x = as_tensor(features, torch.float64)
    if x.dim() == 3:
        x = x.reshape(-1, x.shape[-1])
    if x.dim() != 2:
        raise ShapeError(f"'features' must have shape (h, w, d) or (n, d), got {tuple(x.shape)}!")
    return x


def affinity(features: FeaturesLike, tau: float = 0.2) -> torch.Tensor:
    """Binary affinity `A_ij = [cos(f_i, f_j) >= tau]` between all feature cells.

    The matrix is symmetric with a unit diagonal by construction.

    Raises:
        ValueError: if a feature vector is exactly zero.

    Examples:
        >>> affinity(np.ones((2, 1, 3))).tolist()
        [[1.0, 1.0], [1.0, 1.0]]
    """
    x = _features(features)
    norms = x.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("'features' must not contain zero vectors!")
    unit = x / norms
    A = (unit @ unit.T >= tau).to(torch.float64)
    A = torch.triu(A)
    A = A + torch.triu(A, diagonal=1).T
    A.fill_diagonal_(1.0)
    return A


def ncut_value(A: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Normalized cut of the soft partition `(x, 1 - x)` of the graph `A`.

    `cut = (1 - x)^T A x` and `NCut = cut / (sum(A x) + eps) + cut / (sum(A (1 - x)) + eps)`;
    the value lies in [0, 2] for a non-negative `A`.

    Raises:
        ShapeError: if `x` does not hold one value per node of `A`.

    Examples:
        >>> ncut_value(torch.ones(4, 4), torch.tensor([1., 1., 0., 0.])).item()
        1.0
    """
    A, x = as_tensor(A), as_tensor(x)
    x = x.to(A.dtype) if x.dtype != A.dtype else x
    if A.dim() != 2 or A.shape[0] != A.shape[1] or x.dim() != 1 or x.shape[0] != A.shape[0]:
        raise ShapeError(f"'x' {tuple(x.shape)} must hold one value per node of 'A' {tuple(A.shape)}!")
    Ax = A @ x
    Ax_bar = A @ (1.0 - x)
    cut = torch.dot(1.0 - x, Ax)
    return cut / (Ax.sum() + EPS_DEN) + cut / (Ax_bar.sum() + EPS_DEN)


def ncut_refine(A: torch.Tensor, x0: torch.Tensor, k: int = 10, step: float = 0.15) -> torch.Tensor:
    """Lowers the normalized cut of a soft assignment by `k` Adam steps.

    The assignment is parametrized as `sigmoid(z)` starting from
    `z = logit(clamp(x0, 1e-4, 1 - 1e-4))`, so every iterate stays inside
    (0, 1).

    Args:
        A (Tensor): affinity matrix (n, n).
        x0 (Tensor): initial assignment (n,) in [0, 1].
        k (int): number of optimizer steps.
        step (float): Adam learning rate.

    Returns:
        Tensor: the refined float64 assignment (n,), detached.

    Raises:
        ValueError: if a gradient is not finite.
    """
    A = as_tensor(A, torch.float64).detach()
    x0 = as_tensor(x0, torch.float64).detach()
    if x0.dim() != 1 or x0.shape[0] != A.shape[0]:
        raise ShapeError(f"'x0' {tuple(x0.shape)} must hold one value per node of 'A' {tuple(A.shape)}!")
    assert k >= 0, "'k' must be a non-negative integer!"
    z = torch.logit(x0.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)).clone().requires_grad_(True)
    optimizer = torch.optim.Adam([z], lr=step)
    with torch.enable_grad():
        for _ in range(k):
            optimizer.zero_grad()
            value = ncut_value(A, torch.sigmoid(z))
            value.backward()
            if not torch.isfinite(z.grad).all():
                raise ValueError("the normalized-cut gradient is not finite!")
            optimizer.step()
    return torch.sigmoid(z).detach()


def combine_refinements(mask: Union[np.ndarray, torch.Tensor], x_k: torch.Tensor, frame: ImageLike,
                        params: Optional[CrfParams] = None, feature_grid: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Product of the CRF-refined mask and the CRF-refined NCut assignment.

    `x_k` lives on the feature grid: either already 2-D or flat together
    with `feature_grid`. It is bilinearly resized to the mask grid before
    its CRF refinement.
    """
    m = as_tensor(mask, torch.float64)
    x = as_tensor(x_k, torch.float64)
    if x.dim() == 1:
        if feature_grid is None:
            raise ShapeError("'feature_grid' is required for a flat 'x_k'!")
        x = x.reshape(feature_grid)
    if tuple(x.shape) != tuple(m.shape):
        x = F.interpolate(x[None, None], size=tuple(m.shape), mode='bilinear', align_corners=False)[0, 0]
    return crf_refine(m, frame, params) * crf_refine(x.clamp(0.0, 1.0), frame, params)


def refine_mask(mask: Union[np.ndarray, torch.Tensor], frame: ImageLike, features: Optional[FeaturesLike] = None,
                crf: Optional[CrfParams] = None, semantic_constraint: bool = True, tau: float = 0.2,
                ncut_steps: int = 10, ncut_step: float = 0.15) -> torch.Tensor:
    """Supervision target for an object mask.

    Without features or with `semantic_constraint` off this is
    `crf_refine(mask)`; otherwise the mask is resized to the feature grid,
    refined by `ncut_refine` on the feature affinity, and combined with
    `combine_refinements`.
    """
    if not semantic_constraint or features is None:
        return crf_refine(mask, frame, crf)
    cells = _features(features)
    grid = features.data.shape[:2] if isinstance(features, FeatureMap) else tuple(as_tensor(features).shape[:2])
    m = as_tensor(mask, torch.float64)
    x0 = resize_grid(m, grid).flatten().clamp(0.0, 1.0)
    x_k = ncut_refine(affinity(cells, tau), x0, ncut_steps, ncut_step)
    return combine_refinements(m, x_k.reshape(grid), frame, crf)


def appearance_loss(M: torch.Tensor, M_target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between a mask and its (constant) refinement.

    Examples:
        >>> appearance_loss(torch.tensor([[1.], [0.]]), torch.zeros(2, 1)).item()
        0.5
    """
    M, M_target = as_tensor(M), as_tensor(M_target)
    if M.shape != M_target.shape:
        raise ShapeError(f"'M' {tuple(M.shape)} and 'M_target' {tuple(M_target.shape)} must have the same shape!")
    return ((M - M_target.detach().to(M.dtype)) ** 2).mean()


def stage2_loss(l_app: torch.Tensor, l_motion: torch.Tensor, w_app: float, w_motion: float) -> torch.Tensor:
    """`w_app * l_app + w_motion * l_motion`."""
    assert w_app >= 0.0 and w_motion >= 0.0, "'w_app' and 'w_motion' must be non-negative!"
    return w_app * l_app + w_motion * l_motion


# ======== Stage 2 ========

def _hwc(frames: torch.Tensor) -> torch.Tensor:
    return frames.permute(0, 2, 3, 1).to(torch.float64)


def _use_semantic_constraint(config: TrainConfig, dataset: FramePairDataset) -> bool:
    if config.semantic_constraint is None:
        return dataset.has_features
    if config.semantic_constraint and not dataset.has_features:
        raise ConfigError("the semantic constraint needs feature maps for every frame!")
    return config.semantic_constraint


def _stage2_step(model, optimizer, batch, targets, c_o: int, config: TrainConfig, w_app: float, w_motion: float,
                 stage: str, step: int, recent: List[float]) -> float:
    model.train()
    set_lr(optimizer, poly_lr(step, config.steps_stage2, config.lr, config.min_lr, config.poly_power))
    outputs = model(batch['frame_t'], batch['frame_t1'])
    l_motion = stage1_loss(model, batch, config.symmetric_loss, outputs)
    l_app = appearance_loss(outputs['masks'][:, c_o], targets)
    return apply_loss(optimizer, stage2_loss(l_app, l_motion, w_app, w_motion), stage, step, recent)


def train_stage2(checkpoint: Checkpoint, dataset: FramePairDataset, config: Optional[TrainConfig] = None,
                 crf: Optional[CrfParams] = None) -> Checkpoint:
    """Appearance refinement of a stage-1 checkpoint.

    The first `ceil(steps_stage2 / 2)` steps (CRF sub-stage) supervise the
    object channel with the CRF refinement of the EMA model's mask,
    recomputed every step, and update the EMA after every step. The
    remaining steps (NCut sub-stage) use targets generated once from the
    model at the start of the sub-stage: `refine_mask` with the semantic
    constraint when it is enabled, the plain CRF refinement otherwise.
    Both sub-stages keep the stage-1 motion loss in the objective.

    Args:
        checkpoint (Checkpoint): stage-1 checkpoint with a selected
            `object_channel`; it is not modified.
        dataset (FramePairDataset): training frame pairs.
        config (TrainConfig): defaults to the checkpoint's configuration.
        crf (CrfParams): CRF parameters, defaults when `None`.

    Returns:
        Checkpoint: the refined checkpoint (the input itself when
        `steps_stage2` is 0).

    Raises:
        ConfigError: if no object channel is selected or the dataset is empty.
        DivergenceError: if the loss becomes non-finite.
    """
    config = config if config is not None else checkpoint.config
    crf = crf if crf is not None else CrfParams()
    if checkpoint.object_channel is None:
        raise ConfigError("stage 2 needs a checkpoint with a selected object channel!")
    if config.steps_stage2 == 0:
        return checkpoint
    if len(dataset) == 0:
        raise ConfigError("the training dataset must contain at least one frame pair!")

    ckpt = checkpoint.copy()
    model, c_o = ckpt.model, ckpt.object_channel
    optimizer = make_optimizer(model, config)
    if ckpt.optimizer_state.get('state'):
        optimizer.load_state_dict(ckpt.optimizer_state)
        for group in optimizer.param_groups:
            group['weight_decay'] = config.weight_decay
    ema = ckpt.ema()
    ema.decay = config.ema_momentum
    sampler = batch_indices(len(dataset), config.batch, config.seed + 1)
    use_sc = _use_semantic_constraint(config, dataset)
    steps_crf = (config.steps_stage2 + 1) // 2
    rows, losses = [], []
    logger.info("stage2: %d CRF steps + %d NCut steps (object channel %d, semantic constraint %s)",
                steps_crf, config.steps_stage2 - steps_crf, c_o, 'on' if use_sc else 'off')

    def record(stage: str, step: int, loss: float):
        losses.append(loss)
        rows.append({'stage': stage, 'step': step, 'loss': loss, 'lr': optimizer.param_groups[0]['lr']})
        if (step + 1) % config.log_every == 0:
            logger.info("%s step %d loss=%.4f", stage, step + 1, loss)

    try:
        for step in range(steps_crf):
            indices = next(sampler)
            batch = to_tensors(dataset.batch(indices))
            model.eval()
            ema.apply_shadow()
            try:
                with torch.no_grad():
                    ema_masks = model(batch['frame_t'])['masks'][:, c_o]
            finally:
                ema.restore()
            images = _hwc(batch['frame_t'])
            targets = torch.stack([crf_refine(m, image, crf) for m, image in zip(ema_masks, images)])
            loss = _stage2_step(model, optimizer, batch, targets, c_o, config, config.w_app_crf,
                                config.w_motion_crf, 'stage2_crf', step, losses)
            ema.update()
            record('stage2_crf', step, loss)

        if steps_crf < config.steps_stage2:
            all_targets = _ncut_targets(model, dataset, c_o, crf, config, use_sc)
            for step in range(steps_crf, config.steps_stage2):
                indices = next(sampler)
                batch = to_tensors(dataset.batch(indices))
                targets = torch.stack([all_targets[i] for i in indices])
                loss = _stage2_step(model, optimizer, batch, targets, c_o, config, config.w_app_ncut,
                                    config.w_motion_ncut, 'stage2_ncut', step, losses)
                ema.update()
                record('stage2_ncut', step, loss)
    except DivergenceError as e:
        e.history = concat([ckpt.history, DataFrame(rows, columns=HISTORY_COLUMNS)], ignore_index=True)
        raise

    model.eval()
    ckpt.ema_state = ema.shadow
    ckpt.optimizer_state = optimizer.state_dict()
    ckpt.step += config.steps_stage2
    ckpt.config = config
    ckpt.history = concat([ckpt.history, DataFrame(rows, columns=HISTORY_COLUMNS)], ignore_index=True)
    return ckpt


def _ncut_targets(model, dataset: FramePairDataset, c_o: int, crf: CrfParams, config: TrainConfig,
                  use_sc: bool) -> List[torch.Tensor]:
    """Refinement targets of every pair's first frame, generated once."""
    frames = [dataset[i].frame_t for i in range(len(dataset))]
    masks = model.predict([torch.from_numpy(f) for f in frames])[:, c_o]
    targets = []
    for i, (mask, frame) in enumerate(zip(masks, frames)):
        image = torch.from_numpy(frame).permute(1, 2, 0).to(torch.float64)
        features = dataset[i].features if use_sc else None
        targets.append(refine_mask(mask, image, features, crf, use_sc, config.affinity_threshold,
                                   config.ncut_steps, config.ncut_step_size))
    logger.debug("generated %d NCut-sub-stage targets", len(targets))
    return targets
