"""
Trained-model container and its RCFK file format.

RCFK layout (all integers little-endian):
- magic `b"RCFK"`, uint32 format version (currently 1);
- uint32 byte length, then the UTF-8 configuration snapshot in the
  `train.key = value` text format of `pyRCF.config`;
- uint32 blob count, then for every blob: uint16 name length, UTF-8 name,
  uint8 number of dimensions, one uint32 per dimension and the values as
  little-endian float32.

Blob names are `model/<state key>`, `ema/<parameter>`,
`optim/<index>/<exp_avg|exp_avg_sq|step>` and `meta/<step|object_channel|input_size>`.
"""

from __future__ import annotations
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import copy
import io
import logging
import numpy as np
import torch
from pandas import DataFrame

from pyRCF.config import TrainConfig, section_values, parse_config_text
from pyRCF.errors import FormatError, IoError
from pyRCF.model import EMA, HISTORY_COLUMNS, FrameLike, SegModel, make_optimizer

logger = logging.getLogger(__name__)

RCFK_MAGIC = b'RCFK'
RCFK_VERSION = 1


@dataclass
class Checkpoint:
    """A trained `SegModel` with its EMA weights, optimizer state and training history.

    Attributes:
        model (SegModel): the live model.
        config (TrainConfig): the configuration it was trained with.
        ema_state (dict): EMA shadow of every trainable parameter.
        optimizer_state (dict): `torch.optim.Adam` state dict.
        step (int): optimizer steps taken so far (both stages).
        object_channel (int): the selected object channel, `None` until chosen.
        history (DataFrame): per-step loss log (`stage, step, loss, lr`).
    """

    model: SegModel
    config: TrainConfig
    ema_state: Dict[str, torch.Tensor]
    optimizer_state: dict
    step: int = 0
    object_channel: Optional[int] = None
    history: DataFrame = field(default_factory=lambda: DataFrame(columns=HISTORY_COLUMNS))

    @property
    def input_size(self) -> Tuple[int, int]:
        return self.model.input_size

    def copy(self) -> Checkpoint:
        """Deep copy; the copy shares no tensor with this checkpoint."""
        return Checkpoint(
            model=copy.deepcopy(self.model),
            config=copy.deepcopy(self.config),
            ema_state={k: v.clone() for k, v in self.ema_state.items()},
            optimizer_state=copy.deepcopy(self.optimizer_state),
            step=self.step,
            object_channel=self.object_channel,
            history=self.history.copy(),
        )

    def ema(self) -> EMA:
        return EMA(self.model, self.config.ema_momentum, self.ema_state)

    def predict_masks(self, frames: Sequence[FrameLike], use_ema: bool = False) -> torch.Tensor:
        """Eval-mode soft masks (N, C, H, W), optionally with the EMA weights."""
        if not use_ema:
            return self.model.predict(frames)
        ema = self.ema()
        ema.apply_shadow()
        try:
            return self.model.predict(frames)
        finally:
            ema.restore()

    def predict_object_masks(self, frames: Sequence[FrameLike], use_ema: bool = False) -> np.ndarray:
        """Soft object-channel masks (N, H, W) as float64 numpy arrays."""
        if self.object_channel is None:
            raise ValueError("'object_channel' must be selected before predicting object masks!")
        masks = self.predict_masks(frames, use_ema)
        return masks[:, self.object_channel].double().numpy()

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self)

    def save(self, path: Union[str, Path]) -> None:
        """Writes the RCFK file; the training history is not part of it."""
        payload = self.to_bytes()
        try:
            with open(path, 'wb') as f:
                f.write(payload)
        except OSError as e:
            raise IoError(f"cannot write '{path}': {e}") from e
        logger.info("saved checkpoint (step %d) to %s", self.step, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Checkpoint:
        """Reads an RCFK file written by `save`.

        Raises:
            FormatError: on a bad magic, an unknown version or a truncated file.
        """
        with open(path, 'rb') as f:
            return decode_checkpoint(f.read(), str(path))


def config_text(config: TrainConfig) -> str:
    """Renders `config` as `train.key = value` lines, one per field."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            text = 'none'
        elif isinstance(value, bool):
            text = 'true' if value else 'false'
        elif isinstance(value, Enum):
            text = value.name.lower()
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"train.{f.name} = {text}")
    return '\n'.join(lines) + '\n'


def _blobs(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    blobs = [(f"model/{k}", v) for k, v in ckpt.model.state_dict().items()]
    blobs += [(f"ema/{k}", v) for k, v in ckpt.ema_state.items()]
    state = ckpt.optimizer_state.get('state', {})
    for index in sorted(state):
        for key in ('exp_avg', 'exp_avg_sq', 'step'):
            if key in state[index]:
                blobs.append((f"optim/{index}/{key}", torch.as_tensor(state[index][key])))
    blobs.append(('meta/step', torch.tensor(float(ckpt.step))))
    channel = -1 if ckpt.object_channel is None else ckpt.object_channel
    blobs.append(('meta/object_channel', torch.tensor(float(channel))))
    blobs.append(('meta/input_size', torch.tensor([float(x) for x in ckpt.input_size])))
    return [(name, t.detach().cpu().numpy().astype('<f4')) for name, t in blobs]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    text = config_text(ckpt.config).encode('utf-8')
    out.write(RCFK_MAGIC)
    out.write(np.array([RCFK_VERSION, len(text)], dtype='<u4').tobytes())
    out.write(text)
    blobs = _blobs(ckpt)
    out.write(np.array([len(blobs)], dtype='<u4').tobytes())
    for name, data in blobs:
        encoded = name.encode('utf-8')
        out.write(np.array([len(encoded)], dtype='<u2').tobytes())
        out.write(encoded)
        out.write(np.array([data.ndim], dtype='u1').tobytes())
        out.write(np.array(data.shape, dtype='<u4').tobytes())
        out.write(np.ascontiguousarray(data).tobytes())
    return out.getvalue()


class _Reader:

    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"'{self.source}' is truncated at byte {self.pos}!")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def ints(self, dtype: str, count: int = 1) -> List[int]:
        size = np.dtype(dtype).itemsize
        return [int(x) for x in np.frombuffer(self.take(size * count), dtype=dtype)]


def decode_checkpoint(raw: bytes, source: str = '<bytes>') -> Checkpoint:
    """Rebuilds a `Checkpoint` from RCFK bytes."""
    reader = _Reader(raw, source)
    if reader.take(4) != RCFK_MAGIC:
        raise FormatError(f"'{source}' is not an RCFK checkpoint!")
    version, text_length = reader.ints('<u4', 2)
    if version != RCFK_VERSION:
        raise FormatError(f"'{source}' has RCFK version {version}, expected {RCFK_VERSION}!")
    text = reader.take(text_length).decode('utf-8')
    values = {k.partition('.')[2]: v for k, v in parse_config_text(text, source).items()}
    config = TrainConfig(**section_values(TrainConfig, values, 'train'))

    blobs: Dict[str, np.ndarray] = {}
    (count,) = reader.ints('<u4')
    for _ in range(count):
        (name_length,) = reader.ints('<u2')
        name = reader.take(name_length).decode('utf-8')
        (ndim,) = reader.ints('u1')
        shape = reader.ints('<u4', ndim)
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(4 * n), dtype='<f4').reshape(shape)
        blobs[name] = data.copy()
    if reader.pos != len(raw):
        raise FormatError(f"'{source}' has {len(raw) - reader.pos} trailing bytes!")

    try:
        height, width = (int(x) for x in blobs['meta/input_size'])
        step = int(blobs['meta/step'])
        channel = int(blobs['meta/object_channel'])
    except KeyError as e:
        raise FormatError(f"'{source}' misses the {e} blob!") from None
    model = SegModel(config, (height, width))
    state = {k[len('model/'):]: torch.from_numpy(v) for k, v in blobs.items() if k.startswith('model/')}
    if state.keys() != model.state_dict().keys():
        raise FormatError(f"'{source}' model blobs do not match the configured architecture!")
    model.load_state_dict(state)
    model.eval()
    ema_state = {k[len('ema/'):]: torch.from_numpy(v) for k, v in blobs.items() if k.startswith('ema/')}

    optimizer = make_optimizer(model, config)
    optimizer_state = optimizer.state_dict()
    for name, data in blobs.items():
        if name.startswith('optim/'):
            _, index, key = name.split('/')
            optimizer_state['state'].setdefault(int(index), {})[key] = torch.from_numpy(data)
    return Checkpoint(model=model, config=config, ema_state=ema_state, optimizer_state=optimizer_state,
                      step=step, object_channel=None if channel < 0 else channel)
