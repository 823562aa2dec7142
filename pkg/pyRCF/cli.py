"""
Command-line entry points: `rcf synth|train|tune|eval|export`.

Every command resolves a complete `RunConfig` (defaults, then `--config`
file, then flags) before computing anything. Exit codes are 0 on success,
1 on a runtime failure and 2 on a usage or configuration error.
"""

from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import argparse
import logging
import sys
import numpy as np
from pandas import DataFrame

from pyRCF import __version__
from pyRCF.checkpoint import Checkpoint
from pyRCF.config import COMMANDS, RunConfig, build_run_config, load_config_file
from pyRCF.datagen import (FramePairDataset, Scenario, SequenceParams, VideoSequence, gen_sequence,
                           load_sequences, write_manifest, write_mask, write_sequence)
from pyRCF.errors import ConfigError, DivergenceError, IoError, RCFError, ShapeError
from pyRCF.model import train_stage1
from pyRCF.refine import crf_refine, train_stage2
from pyRCF.tuner import Setting, eval_frames, select_object_channel, select_setting, settings_from_grid, subset_miou

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


# ======== Metric ========

def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard index `|pred & gt| / |pred | gt|` of two binary masks.

    Two empty masks score 1 and exactly one empty mask scores 0.

    Raises:
        ShapeError: if the masks have different shapes.
        ValueError: if a mask holds values other than 0 and 1.

    Examples:
        >>> miou(np.array([1, 1, 0, 0]), np.array([1, 1, 1, 1]))
        0.5
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"'pred' {pred.shape} and 'gt' {gt.shape} must have the same shape!")
    for name, mask in (('pred', pred), ('gt', gt)):
        if mask.dtype != bool and not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"'{name}' must be a binary mask!")
    pred, gt = pred.astype(bool), gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class EvalResult:
    """Per-frame Jaccard indices (`sequence, t, jaccard`) and their means."""

    frames: DataFrame

    @property
    def per_sequence(self) -> DataFrame:
        table = self.frames.groupby('sequence', sort=False)['jaccard'].agg(['mean', 'count']).reset_index()
        return table.rename(columns={'mean': 'jaccard', 'count': 'frames'})

    @property
    def overall(self) -> float:
        return float(self.frames['jaccard'].mean()) if len(self.frames) else float('nan')

    def to_frame(self) -> DataFrame:
        """Per-sequence table followed by an `overall` row."""
        table = self.per_sequence
        overall = DataFrame([{'sequence': 'overall', 'jaccard': self.overall, 'frames': len(self.frames)}])
        return DataFrame(list(table.to_dict('records')) + list(overall.to_dict('records')))


def evaluate_masks(sequences: Sequence[VideoSequence], masks: Sequence[Sequence[np.ndarray]],
                   threshold: float = 0.5) -> EvalResult:
    """Thresholds soft object masks and scores them against every sequence's ground truth.

    Raises:
        ConfigError: if a sequence has no ground-truth masks.
    """
    rows = []
    for seq, seq_masks in zip(sequences, masks):
        if seq.gt_masks is None:
            raise ConfigError(f"sequence '{seq.name}' has no ground-truth masks to evaluate against!")
        for t, (soft, gt) in enumerate(zip(seq_masks, seq.gt_masks)):
            rows.append({'sequence': seq.name, 't': t, 'jaccard': miou(np.asarray(soft) >= threshold, gt)})
    return EvalResult(DataFrame(rows, columns=['sequence', 't', 'jaccard']))


# ======== Datasets from a RunConfig ========

def sequence_params(config: RunConfig) -> SequenceParams:
    """Synthetic-sequence parameters with object size and speeds scaled from the 64x64 defaults."""
    d = config.data
    base = SequenceParams()
    sy, sx = d.height / base.height, d.width / base.width
    return SequenceParams(
        height=d.height, width=d.width, length=d.length, flow_noise=d.flow_noise,
        object_size=(max(2, round(base.object_size[0] * sy)), max(2, round(base.object_size[1] * sx))),
        object_velocity=(base.object_velocity[0] * sx, base.object_velocity[1] * sy),
        background_velocity=(base.background_velocity[0] * sx, base.background_velocity[1] * sy),
        delta=(base.delta[0] * sx, base.delta[1] * sy), delta_bound=base.delta_bound * max(sx, sy),
    )


def _load_dir(config: RunConfig) -> List[VideoSequence]:
    path = Path(config.data.dir)
    if not path.is_dir():
        raise ConfigError(f"dataset directory '{path}' does not exist!")
    sequences = load_sequences(path)
    if not sequences:
        raise ConfigError(f"dataset directory '{path}' lists no sequence!")
    return sequences


def training_sequences(config: RunConfig) -> List[VideoSequence]:
    """The `--data` directory, or `n_sequences` synthetic sequences seeded from `seed`."""
    if config.data.dir is not None:
        return _load_dir(config)
    params = sequence_params(config)
    return [gen_sequence(config.data.scenario, params, config.seed + i) for i in range(config.data.n_sequences)]


def evaluation_sequences(config: RunConfig) -> List[VideoSequence]:
    """The `--data` directory, or held-out synthetic sequences seeded from `seed + eval_seed_offset`."""
    if config.data.dir is not None:
        return _load_dir(config)
    params = sequence_params(config)
    count = max(1, config.data.n_sequences // 2)
    first = config.seed + config.data.eval_seed_offset
    return [gen_sequence(config.data.scenario, params, first + i) for i in range(count)]


def _object_masks(ckpt: Checkpoint, seq: VideoSequence) -> List[np.ndarray]:
    return list(ckpt.predict_object_masks(seq.frames))


def _ensure_object_channel(ckpt: Checkpoint, sequences: Sequence[VideoSequence]) -> None:
    if ckpt.object_channel is None:
        ckpt.object_channel = select_object_channel(ckpt, sequences)


def _load_checkpoint(config: RunConfig) -> Checkpoint:
    if config.checkpoint is None:
        raise ConfigError(f"'{config.command}' needs --checkpoint!")
    if not Path(config.checkpoint).is_file():
        raise ConfigError(f"checkpoint '{config.checkpoint}' does not exist!")
    return Checkpoint.load(config.checkpoint)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create '{out}': {e}") from e
    return out


def _write_table(table: DataFrame, path: Path) -> None:
    try:
        table.to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise IoError(f"cannot write '{path}': {e}") from e


# ======== Commands ========

def cmd_synth(config: RunConfig) -> List[Path]:
    """Writes `n_sequences` synthetic sequences and a manifest under `out`."""
    out = _out_dir(config)
    params = sequence_params(config)
    rows = []
    for i in range(config.data.n_sequences):
        seq = gen_sequence(config.data.scenario, params, config.seed + i)
        rows.extend(write_sequence(seq, out, write_backward=config.data.backward_flow))
    manifest = write_manifest(rows, out)
    logger.info("wrote %d files and %s", len(rows), manifest)
    return [out / row['path'] for row in rows] + [manifest]


def cmd_train(config: RunConfig) -> Dict[str, Any]:
    """Stage 1, object-channel selection and (with `stage` 2) stage 2, then evaluation when labels exist.

    `loss_log.csv` is written even when training diverges; it then holds
    the steps completed before the failure.
    """
    out = _out_dir(config)
    train_seqs = training_sequences(config)
    dataset = FramePairDataset(train_seqs)
    try:
        ckpt = train_stage1(dataset, config.train)
        ckpt.object_channel = select_object_channel(ckpt, train_seqs)
        ckpt.save(out / 'stage1.rcfk')
        result: Dict[str, Any] = {'stage1': ckpt}
        if config.stage == 2:
            ckpt = train_stage2(ckpt, dataset, config.train, config.crf_params)
            ckpt.save(out / 'stage2.rcfk')
            result['stage2'] = ckpt
    except DivergenceError as e:
        if e.history is not None:
            _write_table(e.history, out / 'loss_log.csv')
            logger.info("wrote %d logged steps to %s", len(e.history), out / 'loss_log.csv')
        raise
    _write_table(ckpt.history, out / 'loss_log.csv')

    eval_seqs = evaluation_sequences(config)
    if all(seq.gt_masks is not None for seq in eval_seqs):
        evaluation = evaluate_masks(eval_seqs, [_object_masks(ckpt, s) for s in eval_seqs], config.threshold)
        _write_table(evaluation.to_frame(), out / 'eval.csv')
        print(evaluation.to_frame().to_string(index=False))
        print(f"final mIoU: {evaluation.overall:.4f}")
        result['eval'] = evaluation
    return result


def cmd_tune(config: RunConfig) -> Tuple[Setting, Any]:
    """Trains (or loads) one checkpoint per setting and selects one by motion-appearance alignment."""
    out = _out_dir(config)
    train_seqs = training_sequences(config)
    if config.checkpoint is not None:
        paths = [p.strip() for p in config.checkpoint.split(',') if p.strip()]
        settings = []
        for path in paths:
            if not Path(path).is_file():
                raise ConfigError(f"checkpoint '{path}' does not exist!")
            settings.append(Setting(Path(path).stem, checkpoint=Checkpoint.load(path)))
    else:
        grid = {}
        if config.tune.channels:
            grid['channels'] = list(config.tune.channels)
        if config.tune.weight_decay:
            grid['weight_decay'] = list(config.tune.weight_decay)
        settings = settings_from_grid(grid) if grid else [Setting('default')]
        if not settings:
            raise ConfigError("the tuning grid is empty!")
        dataset = FramePairDataset(train_seqs)
        for setting in settings:
            train_config = setting.train_config(config.train)
            logger.info("tune: training setting %s", setting.name)
            ckpt = train_stage1(dataset, train_config)
            ckpt.object_channel = select_object_channel(ckpt, train_seqs)
            if config.stage == 2:
                ckpt = train_stage2(ckpt, dataset, train_config, config.crf_params)
            setting.checkpoint = ckpt
    for setting in settings:
        _ensure_object_channel(setting.checkpoint, train_seqs)

    chosen, report = select_setting(settings, eval_frames(train_seqs), config.train.affinity_threshold)
    table = report.to_frame()
    eval_seqs = evaluation_sequences(config)
    if all(seq.gt_masks is not None for seq in eval_seqs):
        results = [evaluate_masks(eval_seqs, [_object_masks(s.checkpoint, q) for q in eval_seqs], config.threshold)
                   for s in settings]
        table.insert(2, 'miou', [r.overall for r in results])
        table.insert(3, 'subset_miou', [
            float(np.mean(subset_miou(r.per_sequence.set_index('sequence')['jaccard'].to_dict(), seed=config.seed)))
            for r in results
        ])
    _write_table(table, out / 'tune_report.csv')
    print(table[[c for c in table.columns if not c.startswith('frame_')]].to_string(index=False))
    print(f"chosen setting: {chosen.name}")
    return chosen, report


def cmd_eval(config: RunConfig) -> EvalResult:
    """Scores the thresholded object-channel masks of a checkpoint against ground truth."""
    ckpt = _load_checkpoint(config)
    sequences = evaluation_sequences(config)
    missing = [seq.name for seq in sequences if seq.gt_masks is None]
    if missing:
        raise ConfigError(f"sequences {missing} have no ground-truth masks!")
    _ensure_object_channel(ckpt, sequences)
    result = evaluate_masks(sequences, [_object_masks(ckpt, s) for s in sequences], config.threshold)
    out = _out_dir(config)
    _write_table(result.frames, out / 'eval_frames.csv')
    _write_table(result.to_frame(), out / 'eval.csv')
    print(result.to_frame().to_string(index=False))
    return result


def export_masks(ckpt: Checkpoint, sequences: Sequence[VideoSequence], out: Path, crf: Optional[Any] = None,
                 threshold: float = 0.5) -> Tuple[List[Path], List[List[np.ndarray]]]:
    """Writes `<sequence>/pred_XXX.pgm` binary masks, CRF-post-processed when `crf` is given."""
    paths, all_masks = [], []
    for seq in sequences:
        folder = out / seq.name
        try:
            folder.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoError(f"cannot create '{folder}': {e}") from e
        seq_masks = []
        for t, (soft, frame) in enumerate(zip(_object_masks(ckpt, seq), seq.frames)):
            if crf is not None:
                soft = crf_refine(soft, frame, crf).numpy()
            binary = soft >= threshold
            write_mask(binary, folder / f"pred_{t:03d}.pgm")
            paths.append(folder / f"pred_{t:03d}.pgm")
            seq_masks.append(binary)
        all_masks.append(seq_masks)
    return paths, all_masks


def cmd_export(config: RunConfig) -> List[Path]:
    """Exports per-frame predicted masks, with `--crf` post-processing when requested."""
    ckpt = _load_checkpoint(config)
    sequences = evaluation_sequences(config)
    _ensure_object_channel(ckpt, sequences)
    paths, masks = export_masks(ckpt, sequences, _out_dir(config), config.crf_params if config.crf else None,
                                config.threshold)
    if all(seq.gt_masks is not None for seq in sequences):
        result = evaluate_masks(sequences, [[m.astype(float) for m in seq] for seq in masks], config.threshold)
        print(f"exported {len(paths)} masks, mIoU {result.overall:.4f}")
    else:
        print(f"exported {len(paths)} masks")
    return paths


COMMAND_FUNCTIONS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'tune': cmd_tune,
    'eval': cmd_eval,
    'export': cmd_export,
}


# ======== Argument parsing ========

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='key-value configuration file')
    common.add_argument('--seed', type=int, help='seed of data generation, initialization and shuffling')
    common.add_argument('--out', metavar='DIR', help='output directory')
    common.add_argument('--scenario', choices=[s.value for s in Scenario], help='synthetic scenario')
    common.add_argument('--data', metavar='DIR', help='dataset directory written by `synth`')
    common.add_argument('--sequences', type=int, metavar='N', help='number of synthetic training sequences')
    common.add_argument('--flow-noise', type=float, metavar='SIGMA', help='Gaussian noise (pixels) added to synthetic flow')
    common.add_argument('--stage', type=int, choices=(1, 2), help='train stage 1 only, or both stages')
    common.add_argument('--channels', metavar='C', help='mask channels (comma-separated list for `tune`)')
    common.add_argument('--lambda', dest='lam', type=float, metavar='PX', help='residual bound in pixels')
    common.add_argument('--steps1', type=int, metavar='N', help='stage-1 steps')
    common.add_argument('--steps2', type=int, metavar='N', help='stage-2 steps')
    common.add_argument('--no-sc', action='store_true', help='disable the semantic constraint in stage 2')
    common.add_argument('--crf', action='store_true', help='CRF post-processing of exported masks')
    common.add_argument('--checkpoint', metavar='PATH', help='RCFK checkpoint (comma-separated list for `tune`)')
    common.add_argument('--verbose', '-v', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='rcf', description='Unsupervised video object segmentation from motion.')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)
    helps = {
        'synth': 'write synthetic sequences',
        'train': 'train a segmenter',
        'tune': 'select hyperparameters without labels',
        'eval': 'evaluate a checkpoint against ground truth',
        'export': 'export predicted masks',
    }
    for command in COMMANDS:
        sub.add_parser(command, parents=[common], help=helps[command])
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    """Resolves the configuration of parsed arguments (file values, then flags)."""
    file_values = load_config_file(args.config) if args.config else {}
    overrides: Dict[str, Any] = {}
    if args.scenario is not None:
        overrides['data.scenario'] = args.scenario
    if args.data is not None:
        overrides['data.dir'] = args.data
    if args.sequences is not None:
        overrides['data.n_sequences'] = args.sequences
    if args.flow_noise is not None:
        overrides['data.flow_noise'] = args.flow_noise
    if args.channels is not None:
        overrides['tune.channels' if args.command == 'tune' else 'train.channels'] = args.channels
    if args.lam is not None:
        overrides['train.lam'] = args.lam
    if args.steps1 is not None:
        overrides['train.steps_stage1'] = args.steps1
    if args.steps2 is not None:
        overrides['train.steps_stage2'] = args.steps2
    if args.no_sc:
        overrides['train.semantic_constraint'] = False
    return build_run_config(args.command, file_values, overrides, seed=args.seed, out=args.out, stage=args.stage,
                            crf=args.crf or None, checkpoint=args.checkpoint)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs the command line and returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    configure_logging(args.verbose)
    try:
        config = run_config_from_args(args)
        COMMAND_FUNCTIONS[config.command](config)
    except ConfigError as e:
        logger.error("%s", e)
        print(f"rcf {args.command}: error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        logger.error("training diverged: %s", e)
        return 1
    except RCFError as e:
        logger.error("%s", e)
        return 1
    finally:
        for handler in logging.getLogger().handlers:
            handler.flush()
    return 0
