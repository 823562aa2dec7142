import time
from dataclasses import replace
import pandas as pd

from pyRCF.cli import evaluate_masks
from pyRCF.config import CrfParams, TrainConfig
from pyRCF.datagen import FramePairDataset, SequenceParams, gen_sequence
from pyRCF.model import train_stage1
from pyRCF.refine import crf_refine, train_stage2
from pyRCF.tuner import select_object_channel

# Small synthetic ablations: each block trains from scratch and reports
# held-out mIoU, so the numbers are only comparable within a block.

PARAMS = SequenceParams(height=32, width=32, length=6, object_velocity=(1.5, 0.0),
                        background_velocity=(-0.5, 0.0), object_size=(10, 10), delta=(1.0, 0.0))
BASE = TrainConfig(channels=2, steps_stage1=150, steps_stage2=30, batch=4, lr=1e-3, log_every=50)


def sequences(scenario, first_seed, count):
    return [gen_sequence(scenario, PARAMS, seed) for seed in range(first_seed, first_seed + count)]


def held_out_miou(ckpt, held_out, crf=None):
    masks = []
    for seq in held_out:
        soft = ckpt.predict_object_masks(seq.frames)
        if crf is not None:
            soft = [crf_refine(m, f, crf).numpy() for m, f in zip(soft, seq.frames)]
        masks.append(list(soft))
    return evaluate_masks(held_out, masks).overall


def stage1(scenario, **changes):
    train = sequences(scenario, 0, 4)
    ckpt = train_stage1(FramePairDataset(train), replace(BASE, **changes))
    ckpt.object_channel = select_object_channel(ckpt, train)
    return ckpt, train


start_time = time.time()

# Residual pathway on articulated motion
held_out = sequences('articulated', 1000, 2)
rows = []
for pathway in ('residual', 'scaling', 'none'):
    ckpt, _ = stage1('articulated', residual_pathway=pathway)
    rows.append({'residual_pathway': pathway, 'miou': held_out_miou(ckpt, held_out)})
for lam in (0.0, 10.0):
    ckpt, _ = stage1('articulated', lam=lam)
    rows.append({'residual_pathway': f"residual, lam={lam:g}", 'miou': held_out_miou(ckpt, held_out)})
print("RESIDUAL PATHWAY (articulated)\n")
print(pd.DataFrame(rows).to_string(index=False), "\n")

# Symmetric forward/backward loss
held_out = sequences('rigid', 1000, 2)
rows = []
for symmetric in (False, True):
    ckpt, _ = stage1('rigid', symmetric_loss=symmetric)
    rows.append({'symmetric_loss': symmetric, 'miou': held_out_miou(ckpt, held_out)})
print("SYMMETRIC LOSS (rigid)\n")
print(pd.DataFrame(rows).to_string(index=False), "\n")

# Semantic constraint in stage 2 on a scene with a reflection
held_out = sequences('reflection', 1000, 2)
ckpt, train = stage1('reflection')
rows = [{'stage': 'stage 1', 'miou': held_out_miou(ckpt, held_out)}]
for constraint in (False, True):
    config = replace(BASE, semantic_constraint=constraint)
    refined = train_stage2(ckpt, FramePairDataset(train), config, CrfParams())
    rows.append({'stage': f"stage 2, semantic_constraint={constraint}", 'miou': held_out_miou(refined, held_out)})
print("SEMANTIC CONSTRAINT (reflection)\n")
print(pd.DataFrame(rows).to_string(index=False), "\n")

# CRF post-processing of the final masks
held_out = sequences('rigid', 1000, 2)
ckpt, _ = stage1('rigid')
rows = [
    {'post_processing': 'none', 'miou': held_out_miou(ckpt, held_out)},
    {'post_processing': 'crf', 'miou': held_out_miou(ckpt, held_out, CrfParams())},
]
print("CRF POST-PROCESSING (rigid)\n")
print(pd.DataFrame(rows).to_string(index=False), "\n")

print(f"--- {time.time() - start_time:.2f} seconds ---")
