import time
import numpy as np

from pyRCF.cli import evaluate_masks
from pyRCF.config import CrfParams, TrainConfig
from pyRCF.datagen import FramePairDataset, SequenceParams, gen_sequence
from pyRCF.model import train_stage1
from pyRCF.refine import train_stage2
from pyRCF.tuner import select_object_channel

if __name__ == "__main__":
    start_time = time.time()

    params = SequenceParams(height=32, width=32, length=6, object_velocity=(1.5, 0.0),
                            background_velocity=(-0.5, 0.0), object_size=(10, 10))
    train = [gen_sequence('rigid', params, seed) for seed in range(4)]
    held_out = [gen_sequence('rigid', params, 1000 + seed) for seed in range(2)]
    dataset = FramePairDataset(train)
    print(f"{len(dataset)} frame pairs on a {dataset.grid[0]}x{dataset.grid[1]} grid")

    config = TrainConfig(channels=2, steps_stage1=200, steps_stage2=40, batch=4, lr=1e-3, log_every=50)
    ckpt = train_stage1(dataset, config)
    ckpt.object_channel = select_object_channel(ckpt, train)
    print("object channel:", ckpt.object_channel)

    def miou_of(checkpoint):
        masks = [list(checkpoint.predict_object_masks(seq.frames)) for seq in held_out]
        return evaluate_masks(held_out, masks).overall

    print(f"stage 1 mIoU: {miou_of(ckpt):.4f}")
    ckpt = train_stage2(ckpt, dataset, config, CrfParams())
    print(f"stage 2 mIoU: {miou_of(ckpt):.4f}")
    print(ckpt.history.groupby('stage', sort=False)['loss'].agg(['first', 'last']))

    mask = ckpt.predict_object_masks(held_out[0].frames[:1])[0] >= 0.5
    for row in mask[::2]:
        print(''.join('#' if v else '.' for v in row))
    print(f"object pixels: {int(np.sum(mask))}")

    print(f"--- {time.time() - start_time:.2f} seconds ---")
