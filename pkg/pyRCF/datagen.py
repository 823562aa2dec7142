"""
Frames, flow fields and feature maps: their on-disk formats and a synthetic
video generator with analytic ground truth.

Supported formats:
- `.flo` (Middlebury): float32 magic 202021.25, int32 width, int32 height,
  then row-major interleaved (u, v) float32, all little-endian.
- RCFF feature maps: ASCII "RCFF", uint32 height, width, dim, then row-major
  float32 vectors (dim fastest), all little-endian.
- Binary PGM/PPM (maxval 255) for frames and masks.
"""

from __future__ import annotations
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import logging
import numpy as np
from pandas import DataFrame, read_csv

from pyRCF.errors import ConfigError, FormatError, IoError, ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLO_MAGIC = 202021.25
FLO_MAGIC_BYTES = np.array([FLO_MAGIC], dtype='<f4').tobytes()  # b'PIEH'
RCFF_MAGIC = b'RCFF'
MANIFEST_NAME = 'manifest.csv'


# ======== Domain types ========

@dataclass
class Frame:
    """An RGB frame of shape (height, width, 3) with real values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"'data' must have shape (height, width, 3), got {self.data.shape}!")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("'data' must contain only finite values!")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("'data' values must be in the [0, 1] interval!")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def chw(self) -> np.ndarray:
        """Returns the frame as a channel-first float32 array (3, H, W)."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1), dtype=np.float32)


@dataclass
class FlowField:
    """A dense displacement field (height, width, 2) in pixels; channel 0 is u, channel 1 is v."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"'data' must have shape (height, width, 2), got {self.data.shape}!")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("'data' must contain only finite values!")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    def chw(self) -> np.ndarray:
        """Returns the field as a channel-first float32 array (2, H, W)."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


@dataclass
class FeatureMap:
    """Per-cell feature vectors (height, width, dim) on a grid that may be coarser than the frame."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"'data' must have shape (height, width, dim), got {self.data.shape}!")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("'data' must contain only finite values!")
        if np.any(np.all(self.data == 0.0, axis=-1)):
            raise ValueError("'data' must not contain zero feature vectors!")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def vectors(self) -> np.ndarray:
        """Returns the cells flattened row-major to (height * width, dim)."""
        return self.data.reshape(-1, self.dim)


class Scenario(Enum):
    """Scripted synthetic scenarios."""

    RIGID = 'rigid'
    ARTICULATED = 'articulated'
    REFLECTION = 'reflection'
    STATIC_OBJECT = 'static_object'

    @classmethod
    def parse(cls, name: Union[str, Scenario]) -> Scenario:
        if isinstance(name, Scenario):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown scenario '{name}', expected one of {[s.value for s in cls]}!") from None


@dataclass
class VideoSequence:
    """A sequence of T frames with T - 1 forward flows.

    `backward_flows[t]` (optional) maps frame t + 1 back to frame t.
    `gt_masks` (optional) are boolean arrays on the frame grid and
    `features` (optional) are one `FeatureMap` per frame.
    """

    name: str
    frames: List[Frame]
    flows: List[FlowField]
    backward_flows: Optional[List[FlowField]] = None
    gt_masks: Optional[List[np.ndarray]] = None
    features: Optional[List[FeatureMap]] = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ConfigError(f"sequence '{self.name}' must contain at least two frames!")
        if len(self.flows) != len(self.frames) - 1:
            raise ShapeError(f"sequence '{self.name}' must contain exactly T - 1 forward flows!")
        if self.backward_flows is not None and len(self.backward_flows) != len(self.flows):
            raise ShapeError(f"sequence '{self.name}' must contain as many backward flows as forward flows!")
        if self.gt_masks is not None and len(self.gt_masks) != len(self.frames):
            raise ShapeError(f"sequence '{self.name}' must contain one ground-truth mask per frame!")
        if self.features is not None and len(self.features) != len(self.frames):
            raise ShapeError(f"sequence '{self.name}' must contain one feature map per frame!")
        grid = (self.frames[0].height, self.frames[0].width)
        for item in list(self.frames) + list(self.flows) + list(self.backward_flows or []):
            if (item.height, item.width) != grid:
                raise ShapeError(f"sequence '{self.name}': every frame and flow must share the grid {grid}!")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.frames[0].height, self.frames[0].width


@dataclass
class SyntheticSequence(VideoSequence):
    """A generated `VideoSequence` together with its script.

    `gt_flows` are the noise-free analytic flows (equal to `flows` when
    `params.flow_noise` is 0) and `mirror_masks` marks the reflection region
    (all False outside the reflection scenario).
    """

    scenario: Scenario = Scenario.RIGID
    seed: int = 0
    params: Optional[SequenceParams] = None
    gt_flows: Optional[List[FlowField]] = None
    mirror_masks: Optional[List[np.ndarray]] = None


@dataclass
class SequenceParams:
    """Script parameters of `gen_sequence`. Velocities are (u, v) in pixels per frame."""

    height: int = 64
    width: int = 64
    length: int = 8
    object_velocity: Tuple[float, float] = (3.0, 0.0)
    background_velocity: Tuple[float, float] = (-1.0, 0.0)
    object_size: Tuple[int, int] = (20, 20)
    delta: Tuple[float, float] = (2.0, 0.0)
    delta_bound: float = 4.0
    flow_noise: float = 0.0
    feature_stride: int = 4
    feature_dim: int = 16
    feature_noise: float = 0.05
    texture_amplitude: float = 0.08

    def __post_init__(self):
        self.object_velocity = tuple(float(x) for x in self.object_velocity)
        self.background_velocity = tuple(float(x) for x in self.background_velocity)
        self.delta = tuple(float(x) for x in self.delta)
        self.object_size = tuple(int(x) for x in self.object_size)
        if self.length < 2:
            raise ConfigError(f"'length' must be at least 2, got {self.length}!")
        if self.height < 1 or self.width < 1:
            raise ConfigError("'height' and 'width' must be positive!")
        if min(self.object_size) < 1:
            raise ConfigError("'object_size' must be positive!")
        if self.feature_stride < 1 or self.feature_dim < 2:
            raise ConfigError("'feature_stride' must be >= 1 and 'feature_dim' >= 2!")
        if self.height % self.feature_stride or self.width % self.feature_stride:
            raise ConfigError("'height' and 'width' must be multiples of 'feature_stride'!")
        if self.flow_noise < 0.0 or self.feature_noise < 0.0 or self.delta_bound < 0.0:
            raise ConfigError("'flow_noise', 'feature_noise' and 'delta_bound' must be non-negative!")

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# ======== Binary codecs ========

def _write_bytes(path: PathLike, payload: bytes) -> None:
    try:
        with open(path, 'wb') as f:
            f.write(payload)
    except OSError as e:
        raise IoError(f"cannot write '{path}': {e}") from e


def _read_bytes(path: PathLike) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def read_flo(path: PathLike) -> FlowField:
    """Decodes a Middlebury `.flo` file.

    Args:
        path: path of the file to read.

    Returns:
        FlowField: the decoded field.

    Raises:
        FormatError: if the magic number is wrong or the payload is truncated.
        ValueError: if the file contains non-finite values.

    Examples:
        >>> write_flo(FlowField(np.array([[[1.5, -2.0]]])), 'one.flo')
        >>> read_flo('one.flo').data.tolist()
        [[[1.5, -2.0]]]
    """
    raw = _read_bytes(path)
    if len(raw) < 12:
        raise FormatError(f"'{path}' is too short to hold a .flo header!")
    if raw[:4] != FLO_MAGIC_BYTES:
        magic = np.frombuffer(raw, dtype='<f4', count=1)[0]
        raise FormatError(f"'{path}' has magic {magic!r}, expected {FLO_MAGIC}!")
    width, height = (int(x) for x in np.frombuffer(raw, dtype='<i4', count=2, offset=4))
    if width < 1 or height < 1:
        raise FormatError(f"'{path}' declares an empty {width}x{height} field!")
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise FormatError(f"'{path}' holds {len(raw)} bytes, expected {expected} for a {width}x{height} field!")
    data = np.frombuffer(raw, dtype='<f4', offset=12).reshape(height, width, 2)
    return FlowField(data.astype(np.float32))


def write_flo(flow: FlowField, path: PathLike) -> None:
    """Encodes `flow` as a Middlebury `.flo` file.

    Raises:
        ValueError: if the field contains non-finite values; nothing is written.
        IoError: if `path` cannot be written.
    """
    data = np.asarray(flow.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("'flow' must contain only finite values!")
    height, width = data.shape[:2]
    payload = FLO_MAGIC_BYTES + np.array([width, height], dtype='<i4').tobytes() + data.astype('<f4').tobytes()
    _write_bytes(path, payload)


def read_features(path: PathLike) -> FeatureMap:
    """Decodes an RCFF feature map.

    Raises:
        FormatError: on a bad magic or a payload whose size disagrees with the header.
    """
    raw = _read_bytes(path)
    if len(raw) < 16 or raw[:4] != RCFF_MAGIC:
        raise FormatError(f"'{path}' is not an RCFF feature map!")
    height, width, dim = (int(x) for x in np.frombuffer(raw, dtype='<u4', count=3, offset=4))
    expected = 16 + 4 * height * width * dim
    if len(raw) != expected:
        raise FormatError(f"'{path}' holds {len(raw)} bytes, expected {expected} for {height}x{width}x{dim}!")
    data = np.frombuffer(raw, dtype='<f4', offset=16).reshape(height, width, dim)
    return FeatureMap(data.astype(np.float32))


def write_features(features: FeatureMap, path: PathLike) -> None:
    """Encodes `features` in the RCFF format (see module docstring)."""
    data = np.asarray(features.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("'features' must contain only finite values!")
    header = RCFF_MAGIC + np.array(data.shape, dtype='<u4').tobytes()
    _write_bytes(path, header + data.astype('<f4').tobytes())


def _pnm_tokens(raw: bytes, count: int, pos: int) -> Tuple[List[int], int]:
    tokens = []
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PNM header!")
        tokens.append(int(raw[start:pos]))
    return tokens, pos


def read_pnm(path: PathLike) -> np.ndarray:
    """Reads a binary PGM (P5) or PPM (P6) with maxval 255 as uint8 (H, W) or (H, W, 3)."""
    raw = _read_bytes(path)
    magic = raw[:2]
    if magic not in (b'P5', b'P6'):
        raise FormatError(f"'{path}' is not a binary PGM/PPM file!")
    (width, height, maxval), pos = _pnm_tokens(raw, 3, 2)
    if maxval != 255:
        raise FormatError(f"'{path}' has maxval {maxval}, only 255 is supported!")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if magic == b'P5' else 3
    size = width * height * channels
    if len(raw) - pos != size:
        raise FormatError(f"'{path}' raster holds {len(raw) - pos} bytes, expected {size}!")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    return data.reshape((height, width) if channels == 1 else (height, width, 3)).copy()


def write_pnm(array: np.ndarray, path: PathLike) -> None:
    """Writes a uint8 (H, W) array as PGM or a (H, W, 3) array as PPM."""
    array = np.asarray(array)
    assert array.dtype == np.uint8, "'array' must be of type uint8!"
    assert array.ndim == 2 or (array.ndim == 3 and array.shape[2] == 3), "'array' must be (H, W) or (H, W, 3)!"
    magic = b'P5' if array.ndim == 2 else b'P6'
    header = magic + f"\n{array.shape[1]} {array.shape[0]}\n255\n".encode('ascii')
    _write_bytes(path, header + np.ascontiguousarray(array).tobytes())


def read_frame(path: PathLike) -> Frame:
    """Reads a PPM frame and normalizes it to [0, 1]."""
    data = read_pnm(path)
    if data.ndim != 3:
        raise FormatError(f"'{path}' must be a PPM (P6) image!")
    return Frame(data.astype(np.float64) / 255.0)


def write_frame(frame: Frame, path: PathLike) -> None:
    write_pnm(np.round(frame.data * 255.0).astype(np.uint8), path)


def read_mask(path: PathLike) -> np.ndarray:
    """Reads a {0, 255} PGM mask as a boolean array."""
    data = read_pnm(path)
    if data.ndim != 2:
        raise FormatError(f"'{path}' must be a PGM (P5) image!")
    if not np.all((data == 0) | (data == 255)):
        raise FormatError(f"'{path}' must only contain the values 0 and 255!")
    return data == 255


def write_mask(mask: np.ndarray, path: PathLike) -> None:
    write_pnm(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), path)


# ======== Synthetic sequences ========

class _SineTexture:
    """Band-limited noise: a seeded sum of oriented sinusoids, one set per color channel."""

    def __init__(self, rng: np.random.Generator, amplitude: float, components: int = 6):
        freq = rng.uniform(1.0 / 16.0, 1.0 / 5.0, size=(3, components))
        angle = rng.uniform(0.0, np.pi, size=(3, components))
        self.__kx = 2.0 * np.pi * freq * np.cos(angle)
        self.__ky = 2.0 * np.pi * freq * np.sin(angle)
        self.__phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, components))
        self.__amp = amplitude / np.sqrt(components)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = (x[..., None, None] * self.__kx + y[..., None, None] * self.__ky + self.__phase)
        return self.__amp * np.sin(arg).sum(axis=-1)


def _ellipse(xc: np.ndarray, yc: np.ndarray, x0: float, y0: float, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return ((xc - (x0 + w / 2.0)) / (w / 2.0)) ** 2 + ((yc - (y0 + h / 2.0)) / (h / 2.0)) ** 2 <= 1.0


_BACKGROUND, _BODY, _LEG, _MIRROR = 0, 1, 2, 3


class _Script:
    """Positions and per-frame labels of every scripted region."""

    def __init__(self, scenario: Scenario, p: SequenceParams):
        self.scenario = scenario
        self.p = p
        if scenario is Scenario.STATIC_OBJECT:
            self.v_o = (0.0, 0.0)
            self.v_b = (0.0, 0.0)
        else:
            self.v_o = p.object_velocity
            self.v_b = p.background_velocity
        h, w = p.object_size
        T = p.length
        if scenario is Scenario.ARTICULATED and max(abs(d) for d in p.delta) > p.delta_bound:
            raise ConfigError(f"'delta' {p.delta} exceeds 'delta_bound' {p.delta_bound}!")
        if h > p.height or w > p.width:
            raise ConfigError(f"object {p.object_size} exceeds the {p.height}x{p.width} grid!")

        center_y = p.height / 2.0
        if scenario is Scenario.REFLECTION:
            self.axis = p.height / 2.0
            center_y = self.axis - 2.0 - h / 2.0
        # centre the span swept by the body and the leg over the whole sequence
        drift = [(t * self.v_o[0] + dx, t * self.v_o[1] + dy)
                 for t in range(T) for dx, dy in ((0.0, 0.0), self.leg_offset(t))]
        xs, ys = [d[0] for d in drift], [d[1] for d in drift]
        self.x0 = p.width / 2.0 - w / 2.0 - (min(xs) + max(xs)) / 2.0
        self.y0 = center_y - h / 2.0 - (min(ys) + max(ys)) / 2.0
        self.split = 0.6 * h
        self.__check_extent()

    def origin(self, t: int) -> Tuple[float, float]:
        return self.x0 + t * self.v_o[0], self.y0 + t * self.v_o[1]

    def leg_offset(self, t: int) -> Tuple[float, float]:
        # the leg drifts from the body by delta per frame
        if self.scenario is Scenario.ARTICULATED:
            return t * self.p.delta[0], t * self.p.delta[1]
        return 0.0, 0.0

    def mirror_origin(self, t: int) -> Tuple[float, float]:
        x, y = self.origin(0)
        mirrored_y = 2.0 * self.axis - (y + self.p.object_size[0])
        return x + t * self.v_o[0], mirrored_y + t * self.v_o[1]

    def __check_extent(self):
        p = self.p
        h, w = p.object_size
        boxes = []
        for t in range(p.length):
            x, y = self.origin(t)
            boxes.append((x, y))
            dx, dy = self.leg_offset(t)
            boxes.append((x + dx, y + dy))
            if self.scenario is Scenario.REFLECTION:
                boxes.append(self.mirror_origin(t))
        for x, y in boxes:
            if x < 0.0 or y < 0.0 or x + w > p.width or y + h > p.height:
                raise ConfigError(
                    f"object {p.object_size} leaves the {p.height}x{p.width} grid along its trajectory!"
                )

    def labels(self, t: int, xc: np.ndarray, yc: np.ndarray) -> np.ndarray:
        h = self.p.object_size[0]
        labels = np.full(xc.shape, _BACKGROUND, dtype=np.int8)
        if self.scenario is Scenario.REFLECTION:
            mx, my = self.mirror_origin(t)
            labels[_ellipse(xc, yc, mx, my, self.p.object_size)] = _MIRROR
        x, y = self.origin(t)
        inside = _ellipse(xc, yc, x, y, self.p.object_size)
        if self.scenario is Scenario.ARTICULATED:
            labels[inside & (yc - y < self.split)] = _BODY
            dx, dy = self.leg_offset(t)
            leg = _ellipse(xc, yc, x + dx, y + dy, self.p.object_size) & (yc - (y + dy) >= self.split)
            labels[leg] = _LEG
        else:
            labels[inside] = _BODY
        return labels

    def velocity(self, label: int, t: int) -> Tuple[float, float]:
        """Displacement of a region between frames t and t + 1."""
        if label == _BACKGROUND:
            return self.v_b
        if label == _LEG:
            return self.v_o[0] + self.p.delta[0], self.v_o[1] + self.p.delta[1]
        return self.v_o


def _flow_from_labels(script: _Script, labels: np.ndarray, t: int, sign: float) -> np.ndarray:
    flow = np.zeros(labels.shape + (2,), dtype=np.float64)
    for label in (_BACKGROUND, _BODY, _LEG, _MIRROR):
        u, v = script.velocity(label, t)
        flow[labels == label] = (sign * u, sign * v)
    return flow


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_sequence(scenario: Union[Scenario, str], params: Optional[SequenceParams] = None, seed: int = 0) -> SyntheticSequence:
    """Generates a synthetic sequence with analytic flow, masks and features.

    The object is a textured ellipse translating at `object_velocity` over a
    textured background translating at `background_velocity`:\n
    - rigid: the whole object shares one velocity.
    - articulated: the lower 40% of the object (the leg) moves at
      `object_velocity + delta` on every frame pair, so it drifts away from
      the body by `delta` per frame and every pair carries exactly two
      object flows.
    - reflection: a vertically mirrored, slightly darker copy moves with the
      object; it is excluded from the ground-truth mask and its features are
      close to the background's.
    - static_object: nothing moves.

    Args:
        scenario (Scenario | str): the scripted scenario.
        params (SequenceParams): script parameters, defaults when `None`.
        seed (int): seed of every random draw; the output is a pure function
            of `(scenario, params, seed)`.

    Returns:
        SyntheticSequence: frames, flows, backward flows, masks and features.

    Raises:
        ConfigError: if `params.length < 2`, if the object leaves the grid or
            if `delta` exceeds `delta_bound`.

    Examples:
        >>> seq = gen_sequence('rigid', SequenceParams(object_velocity=(3.0, 0.0)), seed=1)
        >>> seq.flows[0].data[seq.gt_masks[0]][0].tolist()
        [3.0, 0.0]
    """
    scenario = Scenario.parse(scenario)
    p = params if params is not None else SequenceParams()
    script = _Script(scenario, p)

    texture_ss, feature_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    texture_rng = np.random.default_rng(texture_ss)
    background_color = np.array([0.30, 0.45, 0.60]) + texture_rng.uniform(-0.05, 0.05, size=3)
    object_color = np.array([0.75, 0.45, 0.25]) + texture_rng.uniform(-0.05, 0.05, size=3)
    if scenario is Scenario.STATIC_OBJECT:
        object_color = np.array([0.85, 0.35, 0.20])
    background_texture = _SineTexture(texture_rng, p.texture_amplitude)
    object_texture = _SineTexture(texture_rng, p.texture_amplitude)

    yc, xc = np.meshgrid(np.arange(p.height) + 0.5, np.arange(p.width) + 0.5, indexing='ij')
    h = p.object_size[0]

    frames, labels_per_frame = [], []
    for t in range(p.length):
        labels = script.labels(t, xc, yc)
        labels_per_frame.append(labels)
        bx, by = t * script.v_b[0], t * script.v_b[1]
        image = background_color + background_texture(xc - bx, yc - by)
        x, y = script.origin(t)
        body = labels == _BODY
        image[body] = object_color + object_texture(xc[body] - x, yc[body] - y)
        if scenario is Scenario.ARTICULATED:
            dx, dy = script.leg_offset(t)
            leg = labels == _LEG
            image[leg] = object_color + object_texture(xc[leg] - x - dx, yc[leg] - y - dy)
        if scenario is Scenario.REFLECTION:
            mx, my = script.mirror_origin(t)
            mirror = labels == _MIRROR
            reflected = object_color + object_texture(xc[mirror] - mx, h - (yc[mirror] - my))
            image[mirror] = 0.85 * reflected + 0.15 * background_color
        frames.append(Frame(np.clip(image, 0.0, 1.0)))

    gt_flows, backward_flows = [], []
    for t in range(p.length - 1):
        gt_flows.append(FlowField(_flow_from_labels(script, labels_per_frame[t], t, 1.0)))
        backward_flows.append(FlowField(_flow_from_labels(script, labels_per_frame[t + 1], t, -1.0)))

    if p.flow_noise > 0.0:
        noise_rng = np.random.default_rng(noise_ss)
        flows = [FlowField(f.data + noise_rng.normal(0.0, p.flow_noise, size=f.data.shape)) for f in gt_flows]
    else:
        flows = list(gt_flows)

    features = _features(script, labels_per_frame, np.random.default_rng(feature_ss))
    gt_masks = [np.isin(labels, (_BODY, _LEG)) for labels in labels_per_frame]
    mirror_masks = [labels == _MIRROR for labels in labels_per_frame]

    logger.debug("generated %s sequence (seed=%d, %d frames)", scenario.value, seed, p.length)
    return SyntheticSequence(
        name=f"{scenario.value}_{seed}",
        frames=frames,
        flows=flows,
        backward_flows=backward_flows,
        gt_masks=gt_masks,
        features=features,
        scenario=scenario,
        seed=seed,
        params=p,
        gt_flows=gt_flows,
        mirror_masks=mirror_masks,
    )


def _features(script: _Script, labels_per_frame: List[np.ndarray], rng: np.random.Generator) -> List[FeatureMap]:
    p = script.p
    d = p.feature_dim
    background = _unit(rng.normal(size=d))
    obj = rng.normal(size=d)
    obj = _unit(obj - obj.dot(background) * background)
    tilt = rng.normal(size=d)
    tilt = _unit(tilt - tilt.dot(background) * background)
    # cosine with the background is 1 / sqrt(1 + 0.15^2) > 0.98
    mirror = _unit(background + 0.15 * tilt)
    base = {_BACKGROUND: background, _BODY: obj, _LEG: obj, _MIRROR: mirror}

    s = p.feature_stride
    maps = []
    for labels in labels_per_frame:
        cells = labels[s // 2::s, s // 2::s]
        data = np.empty(cells.shape + (d,), dtype=np.float64)
        for label, vector in base.items():
            data[cells == label] = vector
        data += rng.normal(0.0, p.feature_noise / np.sqrt(d), size=data.shape)
        maps.append(FeatureMap(data))
    return maps


# ======== Datasets ========

@dataclass
class FramePair:
    """One training sample: two consecutive frames and the flows between them."""

    frame_t: np.ndarray
    frame_t1: np.ndarray
    flow: np.ndarray
    backward_flow: Optional[np.ndarray]
    features: Optional[FeatureMap]
    gt_mask: Optional[np.ndarray]


class FramePairDataset:
    """All consecutive frame pairs of a list of sequences, in (sequence, t) order."""

    def __init__(self, sequences: Sequence[VideoSequence]):
        self.sequences = list(sequences)
        self.index = [(s, t) for s, seq in enumerate(self.sequences) for t in range(len(seq.flows))]
        grids = {seq.grid for seq in self.sequences}
        if len(grids) > 1:
            raise ShapeError(f"every sequence must share one grid, got {sorted(grids)}!")

    def __len__(self) -> int:
        return len(self.index)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.sequences[0].grid

    @property
    def has_features(self) -> bool:
        return all(seq.features is not None for seq in self.sequences)

    def __getitem__(self, i: int) -> FramePair:
        s, t = self.index[i]
        seq = self.sequences[s]
        return FramePair(
            frame_t=seq.frames[t].chw(),
            frame_t1=seq.frames[t + 1].chw(),
            flow=seq.flows[t].chw(),
            backward_flow=seq.backward_flows[t].chw() if seq.backward_flows is not None else None,
            features=seq.features[t] if seq.features is not None else None,
            gt_mask=seq.gt_masks[t] if seq.gt_masks is not None else None,
        )

    def batch(self, indices: Sequence[int]) -> Dict[str, object]:
        """Stacks the samples at `indices` into channel-first float32 arrays."""
        pairs = [self[i] for i in indices]
        has_backward = all(p.backward_flow is not None for p in pairs)
        return {
            'frame_t': np.stack([p.frame_t for p in pairs]),
            'frame_t1': np.stack([p.frame_t1 for p in pairs]),
            'flow': np.stack([p.flow for p in pairs]),
            'backward_flow': np.stack([p.backward_flow for p in pairs]) if has_backward else None,
            'features': [p.features for p in pairs],
            'indices': list(indices),
        }

    @classmethod
    def from_directory(cls, directory: PathLike) -> FramePairDataset:
        """Builds the dataset from a directory written by `write_sequence` and `write_manifest`."""
        return cls(load_sequences(directory))


# ======== Directory layout ========

def write_sequence(seq: VideoSequence, directory: PathLike, write_backward: bool = False) -> List[dict]:
    """Writes one sequence under `directory/<seq.name>/` and returns its manifest rows."""
    root = Path(directory)
    folder = root / seq.name
    try:
        folder.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create '{folder}': {e}") from e
    rows = []

    def add(kind: str, t: int, name: str):
        rows.append({'sequence': seq.name, 't': t, 'kind': kind, 'path': f"{seq.name}/{name}"})

    for t, frame in enumerate(seq.frames):
        write_frame(frame, folder / f"frame_{t:03d}.ppm")
        add('frame', t, f"frame_{t:03d}.ppm")
    for t, flow in enumerate(seq.flows):
        write_flo(flow, folder / f"flow_{t:03d}.flo")
        add('flow', t, f"flow_{t:03d}.flo")
    if write_backward and seq.backward_flows is not None:
        for t, flow in enumerate(seq.backward_flows):
            write_flo(flow, folder / f"backflow_{t:03d}.flo")
            add('backflow', t, f"backflow_{t:03d}.flo")
    for t, features in enumerate(seq.features or []):
        write_features(features, folder / f"features_{t:03d}.rcff")
        add('features', t, f"features_{t:03d}.rcff")
    for t, mask in enumerate(seq.gt_masks or []):
        write_mask(mask, folder / f"mask_{t:03d}.pgm")
        add('mask', t, f"mask_{t:03d}.pgm")
    return rows


def write_manifest(rows: List[dict], directory: PathLike) -> Path:
    path = Path(directory) / MANIFEST_NAME
    try:
        DataFrame(rows, columns=['sequence', 't', 'kind', 'path']).to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise IoError(f"cannot write '{path}': {e}") from e
    return path


def load_sequences(directory: PathLike) -> List[VideoSequence]:
    """Loads every sequence listed in `directory/manifest.csv`.

    Sequences are returned in manifest order, frames in time order.

    Raises:
        ConfigError: if the directory or its manifest does not exist.
    """
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise ConfigError(f"'{root}' is not a dataset directory (missing {MANIFEST_NAME})!")
    table = read_csv(manifest)
    readers = {
        'frame': read_frame, 'flow': read_flo, 'backflow': read_flo,
        'features': read_features, 'mask': read_mask,
    }
    sequences = []
    for name in dict.fromkeys(table['sequence']):
        rows = table[table['sequence'] == name].sort_values('t', kind='stable')
        items: Dict[str, list] = {kind: [] for kind in readers}
        for row in rows.itertuples(index=False):
            if row.kind not in readers:
                raise FormatError(f"unknown manifest kind '{row.kind}'!")
            items[row.kind].append(readers[row.kind](root / row.path))
        sequences.append(VideoSequence(
            name=str(name),
            frames=items['frame'],
            flows=items['flow'],
            backward_flows=items['backflow'] or None,
            gt_masks=items['mask'] or None,
            features=items['features'] or None,
        ))
    logger.info("loaded %d sequences from %s", len(sequences), root)
    return sequences


def synthetic_dataset(scenario: Union[Scenario, str], params: Optional[SequenceParams], seeds: Sequence[int]) -> List[SyntheticSequence]:
    """Generates one sequence per seed."""
    return [gen_sequence(scenario, params, seed) for seed in seeds]


def with_params(params: SequenceParams, **overrides) -> SequenceParams:
    """Returns a copy of `params` with some fields replaced."""
    return replace(params, **overrides)
