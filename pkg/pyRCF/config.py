"""
Configuration records and the key-value configuration file.

A configuration file holds one `section.key = value` assignment per line;
`#` starts a comment and blank lines are ignored:

    # stage-1 settings
    train.lr = 1e-4
    train.channels = 4
    crf.theta_alpha = 20
    data.scenario = articulated
    tune.channels = 2,3,4,5,6

Sections map to the records below: `train` to `TrainConfig`, `crf` to
`CrfParams`, `data` to `DataConfig` and `tune` to `TuneConfig`. Values are
resolved as dataclass defaults, then the file, then command-line flags.
"""

from __future__ import annotations
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

import logging

from pyRCF.datagen import Scenario
from pyRCF.errors import ConfigError
from pyRCF.motion import ResidualPathway

logger = logging.getLogger(__name__)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class TrainConfig:
    """Hyperparameters of the segmenter and of both training stages.

    Stage 2 runs two sub-stages of `steps_stage2 // 2` steps each (the CRF
    sub-stage gets the odd step when `steps_stage2` is odd), each with its
    own pair of loss weights.
    """

    lr: float = 1e-4
    min_lr: float = 1e-6
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    steps_stage1: int = 800
    steps_stage2: int = 200
    lam: float = 10.0
    channels: int = 4
    seed: int = 0
    ema_momentum: float = 0.999
    w_app_crf: float = 10.0
    w_motion_crf: float = 1.0
    w_app_ncut: float = 2.0
    w_motion_ncut: float = 0.1
    symmetric_loss: bool = False
    feature_channels: int = 32
    head_width: int = 32
    mlp_hidden: int = 16
    res_init_scale: float = 0.1
    residual_pathway: ResidualPathway = ResidualPathway.RESIDUAL
    semantic_constraint: Optional[bool] = None
    affinity_threshold: float = 0.2
    ncut_steps: int = 10
    ncut_step_size: float = 0.15
    log_every: int = 50

    def __post_init__(self):
        self.residual_pathway = ResidualPathway.parse(self.residual_pathway)
        _require(self.lr >= 0.0 and self.min_lr >= 0.0, "'lr' and 'min_lr' must be non-negative!")
        _require(self.poly_power > 0.0, "'poly_power' must be positive!")
        _require(self.weight_decay >= 0.0, "'weight_decay' must be non-negative!")
        _require(self.batch >= 1, "'batch' must be at least 1!")
        _require(self.steps_stage1 >= 0 and self.steps_stage2 >= 0, "'steps_stage1' and 'steps_stage2' must be non-negative!")
        _require(self.lam >= 0.0, "'lam' must be non-negative!")
        _require(self.channels >= 1, "'channels' must be at least 1!")
        _require(0.0 <= self.ema_momentum <= 1.0, "'ema_momentum' must be in the [0, 1] interval!")
        _require(min(self.w_app_crf, self.w_motion_crf, self.w_app_ncut, self.w_motion_ncut) >= 0.0,
                 "stage-2 loss weights must be non-negative!")
        _require(min(self.feature_channels, self.head_width, self.mlp_hidden) >= 1,
                 "'feature_channels', 'head_width' and 'mlp_hidden' must be positive!")
        _require(self.res_init_scale >= 0.0, "'res_init_scale' must be non-negative!")
        _require(-1.0 <= self.affinity_threshold <= 1.0, "'affinity_threshold' must be in the [-1, 1] interval!")
        _require(self.ncut_steps >= 0 and self.ncut_step_size > 0.0, "'ncut_steps' must be >= 0 and 'ncut_step_size' > 0!")
        _require(self.log_every >= 1, "'log_every' must be at least 1!")


@dataclass
class CrfParams:
    """Kernel weights and bandwidths of the two-label dense CRF.

    Bandwidths are in pixels (`theta_alpha`, `theta_gamma`) and in color
    units for colors in [0, 1] (`theta_beta`).
    """

    w_app_kernel: float = 4.0
    theta_alpha: float = 20.0
    theta_beta: float = 0.2
    w_smooth: float = 2.0
    theta_gamma: float = 3.0
    iterations: int = 5
    unary_eps: float = 1e-5

    def __post_init__(self):
        _require(self.w_app_kernel >= 0.0 and self.w_smooth >= 0.0, "'w_app_kernel' and 'w_smooth' must be non-negative!")
        _require(min(self.theta_alpha, self.theta_beta, self.theta_gamma) > 0.0, "CRF bandwidths must be positive!")
        _require(self.iterations >= 1, "'iterations' must be at least 1!")
        _require(0.0 < self.unary_eps < 0.5, "'unary_eps' must be in the (0, 0.5) interval!")


@dataclass
class DataConfig:
    """Where the frames come from: a synthetic scenario or a `synth` output directory."""

    scenario: str = 'rigid'
    dir: Optional[str] = None
    n_sequences: int = 4
    length: int = 8
    height: int = 64
    width: int = 64
    flow_noise: float = 0.0
    backward_flow: bool = False
    eval_seed_offset: int = 1000

    def __post_init__(self):
        self.scenario = Scenario.parse(self.scenario).value
        _require(self.n_sequences >= 1, "'n_sequences' must be at least 1!")
        _require(self.length >= 2, "'length' must be at least 2!")
        _require(self.height >= 1 and self.width >= 1, "'height' and 'width' must be positive!")
        _require(self.flow_noise >= 0.0, "'flow_noise' must be non-negative!")


@dataclass
class TuneConfig:
    """Value lists swept by the `tune` command; empty lists keep the training value."""

    channels: Tuple[int, ...] = (2, 3, 4, 5, 6)
    weight_decay: Tuple[float, ...] = ()

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.weight_decay = tuple(float(w) for w in self.weight_decay)
        _require(all(c >= 1 for c in self.channels), "'tune.channels' entries must be positive!")
        _require(all(w >= 0.0 for w in self.weight_decay), "'tune.weight_decay' entries must be non-negative!")


@dataclass
class RunConfig:
    """Everything a command needs, complete and validated before any computation."""

    command: str = 'train'
    seed: int = 0
    out: str = 'rcf_out'
    stage: int = 2
    crf: bool = False
    checkpoint: Optional[str] = None
    threshold: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    crf_params: CrfParams = field(default_factory=CrfParams)
    data: DataConfig = field(default_factory=DataConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)

    def __post_init__(self):
        _require(self.command in COMMANDS, f"unknown command '{self.command}', expected one of {list(COMMANDS)}!")
        _require(self.stage in (1, 2), "'stage' must be 1 or 2!")
        _require(0.0 < self.threshold < 1.0, "'threshold' must be in the (0, 1) interval!")


COMMANDS = ('synth', 'train', 'tune', 'eval', 'export')

SECTIONS = {
    'train': 'train',
    'crf': 'crf_params',
    'data': 'data',
    'tune': 'tune',
}


_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def _coerce(raw: str, hint: Any, key: str) -> Any:
    text = raw.strip()
    origin = getattr(hint, '__origin__', None)
    args = getattr(hint, '__args__', ())
    try:
        if origin is Union:
            if text.lower() in ('', 'none', 'auto'):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _coerce(text, inner, key)
        if origin is tuple:
            return tuple(_coerce(part, args[0], key) for part in text.split(',') if part.strip())
        if hint is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(hint, type) and issubclass(hint, Enum):
            return text
        return hint(text)
    except (ValueError, TypeError):
        raise ConfigError(f"'{key}' cannot be read from '{raw}'!") from None


def parse_config_text(text: str, source: str = '<string>') -> Dict[str, str]:
    """Parses configuration text into a `{'section.key': 'raw value'}` mapping.

    Raises:
        ConfigError: on a line without `=`, or a key without a section.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{number}: expected 'section.key = value', got '{line}'!")
        key, value = (part.strip() for part in line.split('=', 1))
        if '.' not in key:
            raise ConfigError(f"{source}:{number}: key '{key}' has no section prefix!")
        values[key] = value
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file '{path}' does not exist!")
    return parse_config_text(path.read_text(encoding='utf-8'), str(path))


def section_values(section_cls: type, values: Mapping[str, Any], section: str) -> Dict[str, Any]:
    hints = get_type_hints(section_cls)
    names = {f.name for f in fields(section_cls)}
    out = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown configuration key '{section}.{key}'!")
        out[key] = _coerce(raw, hints[key], f"{section}.{key}") if isinstance(raw, str) else raw
    return out


def build_run_config(command: str, file_values: Optional[Mapping[str, str]] = None,
                     overrides: Optional[Mapping[str, Any]] = None, **top_level) -> RunConfig:
    """Assembles a `RunConfig`: defaults, then `file_values`, then `overrides`.

    Args:
        command (str): the command to run.
        file_values (Mapping): `{'section.key': raw}` pairs, usually from
            `load_config_file`.
        overrides (Mapping): `{'section.key': value}` pairs from command-line
            flags; values may be raw strings or already typed.
        **top_level: `RunConfig` fields other than the sections (seed, out,
            stage, crf, checkpoint, threshold).

    Raises:
        ConfigError: on an unknown section or key, an unreadable value, or a
            value rejected by a record's validation.

    Examples:
        >>> cfg = build_run_config('train', {'train.lr': '1e-3'}, {'train.lr': 5e-4})
        >>> cfg.train.lr
        0.0005
    """
    merged: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            section, _, name = key.partition('.')
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown configuration key '{key}'!")
            merged[section][name] = value

    records = {}
    for section, attribute in SECTIONS.items():
        record_cls = get_type_hints(RunConfig)[attribute]
        records[attribute] = record_cls(**section_values(record_cls, merged[section], section))
    if top_level.get('seed') is not None:
        records['train'].seed = int(top_level['seed'])
    top_level['seed'] = records['train'].seed
    config = RunConfig(command=command, **records, **{k: v for k, v in top_level.items() if v is not None})
    logger.debug("resolved configuration: %s", config)
    return config
