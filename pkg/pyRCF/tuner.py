"""
Label-free model selection by motion-appearance alignment.

A mask predicted from motion is scored by how well it cuts the appearance
graph of its frame: the score is the negative normalized cut of the mask on
the thresholded-cosine affinity of the frame's feature map. Higher is
better and the maximum, 0, is reached by a mask that separates feature
groups exactly. Because the normalized cut of a mask equals that of its
complement, a channel and its exact complement always tie; ties go to the
lowest index.
"""

from __future__ import annotations
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import logging
import numpy as np
import torch
from pandas import DataFrame

from pyRCF.config import TrainConfig
from pyRCF.datagen import FeatureMap, Frame, VideoSequence
from pyRCF.errors import ConfigError, IoError
from pyRCF.nn_ops import as_tensor, resize_grid
from pyRCF.refine import affinity, ncut_value

logger = logging.getLogger(__name__)


def alignment_score(mask: Union[np.ndarray, torch.Tensor], features: Union[FeatureMap, np.ndarray], tau: float = 0.2) -> float:
    """Negative normalized cut of a soft mask on the appearance affinity of `features`.

    The mask is resized to the feature grid (area averaging when
    shrinking) and scored without binarization.

    Returns:
        float: a value in [-2, 0].

    Examples:
        >>> features = np.ones((2, 2, 3))
        >>> alignment_score(np.array([[1.0, 1.0], [0.0, 0.0]]), features)
        -1.0
    """
    data = features.data if isinstance(features, FeatureMap) else np.asarray(features)
    grid = data.shape[:2]
    x = resize_grid(as_tensor(mask, torch.float64), grid).flatten()
    return -float(ncut_value(affinity(data, tau), x))


@dataclass
class EvalFrame:
    """A validation frame with the feature map used to score it."""

    frame: Frame
    features: FeatureMap


def eval_frames(sequences: Sequence[VideoSequence], first_only: bool = False) -> List[EvalFrame]:
    """Collects the (frame, features) pairs of `sequences`, optionally first frames only.

    Raises:
        ConfigError: if a sequence has no feature maps.
    """
    out = []
    for seq in sequences:
        if seq.features is None:
            raise ConfigError(f"sequence '{seq.name}' has no feature maps to score masks against!")
        count = 1 if first_only else len(seq.frames)
        out.extend(EvalFrame(seq.frames[t], seq.features[t]) for t in range(count))
    return out


@dataclass
class Setting:
    """One candidate of a sweep.

    A setting is scored either from a trained `checkpoint` (its object
    channel mask, or channel `channel` when given) or from precomputed
    per-frame `masks`.

    Attributes:
        name (str): identifier used in reports.
        overrides (dict): `TrainConfig` fields this setting changes.
        checkpoint: trained checkpoint, filled in by the sweep.
        masks (list): soft object masks, one per evaluation frame.
        channel (int): candidate object channel.
    """

    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Any = None
    masks: Optional[Sequence[np.ndarray]] = None
    channel: Optional[int] = None

    def train_config(self, base: TrainConfig) -> TrainConfig:
        """`base` with this setting's overrides applied."""
        try:
            return replace(base, **self.overrides)
        except TypeError as e:
            raise ConfigError(f"setting '{self.name}' overrides an unknown field: {e}") from None

    def object_masks(self, frames: Sequence[EvalFrame]) -> List[np.ndarray]:
        if self.masks is not None:
            if len(self.masks) != len(frames):
                raise ConfigError(f"setting '{self.name}' has {len(self.masks)} masks for {len(frames)} frames!")
            return [np.asarray(m, dtype=np.float64) for m in self.masks]
        if self.checkpoint is None:
            raise ConfigError(f"setting '{self.name}' has neither a checkpoint nor masks!")
        channel = self.channel if self.channel is not None else self.checkpoint.object_channel
        if channel is None:
            channel = select_object_channel(self.checkpoint, frames)
        masks = self.checkpoint.predict_masks([f.frame for f in frames])
        return [m[channel].double().numpy() for m in masks]


def settings_from_grid(grid: Mapping[str, Sequence[Any]]) -> List[Setting]:
    """Cartesian product of `{field: values}` as settings named `field=value,...`.

    Examples:
        >>> [s.name for s in settings_from_grid({'channels': [2, 3]})]
        ['channels=2', 'channels=3']
    """
    keys = list(grid)
    settings = []
    for values in product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        settings.append(Setting(','.join(f"{k}={v}" for k, v in overrides.items()), overrides))
    return settings


@dataclass
class AlignmentReport:
    """Per-frame alignment scores of every setting and the chosen one.

    Attributes:
        names (list): setting names, in input order.
        frame_scores (list): per-setting lists of per-frame scores.
        chosen (int): index of the chosen setting.
    """

    names: List[str]
    frame_scores: List[List[float]]
    chosen: int

    @property
    def mean_scores(self) -> List[float]:
        return [float(np.mean(scores)) if scores else float('nan') for scores in self.frame_scores]

    @property
    def chosen_name(self) -> str:
        return self.names[self.chosen]

    def to_frame(self) -> DataFrame:
        """One row per setting: name, mean score, chosen flag and one column per frame."""
        n_frames = max((len(s) for s in self.frame_scores), default=0)
        rows = []
        for i, (name, scores, mean) in enumerate(zip(self.names, self.frame_scores, self.mean_scores)):
            row = {'setting': name, 'mean_score': mean, 'chosen': i == self.chosen}
            row.update({f"frame_{t:03d}": scores[t] if t < len(scores) else np.nan for t in range(n_frames)})
            rows.append(row)
        return DataFrame(rows)

    def to_csv(self, path: Optional[Union[str, Path]] = None) -> Optional[str]:
        """Comma-separated report; written to `path` when given, returned otherwise."""
        if path is None:
            return self.to_frame().to_csv(index=False, lineterminator='\n')
        try:
            self.to_frame().to_csv(path, index=False, lineterminator='\n')
        except OSError as e:
            raise IoError(f"cannot write '{path}': {e}") from e
        return None

    def __str__(self) -> str:
        table = self.to_frame()[['setting', 'mean_score', 'chosen']]
        return table.to_string(index=False)


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i, value in enumerate(values):
        if value > values[best]:
            best = i
    return best


def select_setting(settings: Sequence[Setting], frames: Sequence[EvalFrame], tau: float = 0.2) -> Tuple[Setting, AlignmentReport]:
    """Chooses the setting whose masks align best with appearance on `frames`.

    Every setting is scored by the mean `alignment_score` of its object
    masks over the frames; the highest mean wins and ties go to the
    earliest setting.

    Raises:
        ConfigError: if `settings` is empty.
    """
    if not settings:
        raise ConfigError("'settings' must contain at least one setting!")
    frame_scores = []
    for setting in settings:
        masks = setting.object_masks(frames)
        scores = [alignment_score(m, f.features, tau) for m, f in zip(masks, frames)]
        frame_scores.append(scores)
        logger.info("setting %s: mean alignment %.4f over %d frames", setting.name,
                    np.mean(scores) if scores else float('nan'), len(scores))
    report = AlignmentReport([s.name for s in settings], frame_scores, 0)
    report.chosen = _argmax_first(report.mean_scores)
    return settings[report.chosen], report


def select_object_channel(checkpoint: Any, sequences: Sequence[Union[VideoSequence, EvalFrame]], tau: float = 0.2) -> int:
    """Chooses the object channel of a trained model from first frames.

    Each channel is scored by its mean alignment over the first frame of
    every sequence (or over the given `EvalFrame`s); ties go to the lowest
    channel index.

    Args:
        checkpoint: any object with a `predict_masks(frames)` method
            returning (N, C, H, W) soft masks, such as a `Checkpoint`.
        sequences: sequences with feature maps, or evaluation frames.

    Returns:
        int: the selected channel.
    """
    if sequences and isinstance(sequences[0], EvalFrame):
        frames = list(sequences)
    else:
        frames = eval_frames(sequences, first_only=True)
    if not frames:
        raise ConfigError("object-channel selection needs at least one frame!")
    masks = torch.as_tensor(checkpoint.predict_masks([f.frame for f in frames]))
    C = masks.shape[1]
    means = [float(np.mean([alignment_score(masks[i, c], f.features, tau) for i, f in enumerate(frames)]))
             for c in range(C)]
    channel = _argmax_first(means)
    logger.info("object channel %d (alignment per channel: %s)", channel, ', '.join(f"{m:.4f}" for m in means))
    return channel


def subset_miou(per_sequence: Mapping[str, float], fraction: float = 0.25, repeats: int = 3, seed: int = 0) -> List[float]:
    """Labeled-subset baseline: mean IoU over seeded random subsets of the sequences.

    Each repeat draws `max(1, round(fraction * n))` sequences without
    replacement and averages their IoU.
    """
    assert 0.0 < fraction <= 1.0, "'fraction' must be in the (0, 1] interval!"
    names = list(per_sequence)
    if not names:
        raise ConfigError("'per_sequence' must contain at least one sequence!")
    rng = np.random.default_rng(seed)
    size = max(1, int(round(fraction * len(names))))
    return [float(np.mean([per_sequence[names[i]] for i in rng.choice(len(names), size=size, replace=False)]))
            for _ in range(repeats)]
