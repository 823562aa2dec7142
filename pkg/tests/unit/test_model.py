import unittest
import math
from unittest import mock
import numpy as np
import torch
import torch.nn as nn

from pyRCF.model import *
from pyRCF.motion import predicted_flow
from pyRCF.config import TrainConfig
from pyRCF.datagen import FramePairDataset, SequenceParams, gen_sequence
from pyRCF.errors import ConfigError, DivergenceError, ShapeError

SMALL = SequenceParams(height=32, width=32, length=4, object_velocity=(2.0, 0.0), object_size=(12, 12))


def tiny_config(**overrides):
    values = dict(channels=3, feature_channels=8, head_width=8, mlp_hidden=4, batch=2,
                  steps_stage1=3, steps_stage2=2, log_every=1)
    values.update(overrides)
    return TrainConfig(**values)


def tiny_dataset(n=2):
    return FramePairDataset([gen_sequence('rigid', SMALL, seed) for seed in range(n)])


GRADIENT_INSTANCES = 20


def smooth(model):
    """Swaps every ReLU for a softplus so that the loss has no kink in any parameter."""
    for parent in list(model.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, nn.ReLU):
                setattr(parent, name, nn.Softplus())
    return model


def gradient_instance(seed):
    """A smooth double-precision 8x8 model and a batch whose flow components lie 2 to 3 px from zero."""
    torch.manual_seed(seed)
    model = smooth(SegModel(tiny_config(lam=1.0), (8, 8))).double()
    g = torch.Generator().manual_seed(1000 + seed)
    sign = torch.randint(0, 2, (2, 2, 8, 8), generator=g).to(torch.float64) * 2.0 - 1.0
    batch = {
        'frame_t': torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64),
        'frame_t1': torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64),
        'flow': sign * (2.0 + torch.rand(2, 2, 8, 8, generator=g, dtype=torch.float64)),
        'backward_flow': None,
    }
    return model, batch


def reconstruction_margin(model, batch):
    """Smallest |F_hat - F| component; the L1 loss is smooth within that distance."""
    with torch.no_grad():
        outputs = model(batch['frame_t'], batch['frame_t1'])
        F_hat = predicted_flow(batch['flow'], outputs['masks'], outputs['residuals'][:, 0], model.lam,
                               model.phi1, model.phi2, model.pathway)
    return (F_hat - batch['flow']).abs().min().item()


class Test_SegModel___init__(unittest.TestCase):

    def test_input_not_multiple_of_four(self):
        with self.assertRaises(ConfigError):
            SegModel(tiny_config(), (30, 32))

    def test_symmetric_head_predicts_both_directions(self):
        model = SegModel(tiny_config(symmetric_loss=True), (16, 16))
        self.assertEqual(model.directions, 2)
        out = model(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16))
        self.assertEqual(tuple(out['residuals'].shape), (1, 2, 3, 2, 16, 16))


class Test_forward_masks(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = SegModel(tiny_config(), (16, 16))

    def test_masks_form_a_partition(self):
        M = forward_masks(self.model, torch.rand(3, 16, 16))
        self.assertEqual(tuple(M.shape), (3, 16, 16))
        self.assertTrue(torch.allclose(M.sum(dim=0), torch.ones(16, 16), atol=1e-6))
        self.assertTrue(bool((M >= 0).all() and (M <= 1).all()))

    def test_zero_head_gives_uniform_masks(self):
        with torch.no_grad():
            self.model.seg_head[-1].weight.zero_()
            self.model.seg_head[-1].bias.zero_()
        M = forward_masks(self.model, torch.rand(2, 3, 16, 16))
        self.assertTrue(torch.allclose(M, torch.full_like(M, 1.0 / 3.0)))

    def test_eval_mode_is_deterministic(self):
        self.model.eval()
        x = torch.rand(3, 16, 16)
        with torch.no_grad():
            self.assertTrue(torch.equal(forward_masks(self.model, x), forward_masks(self.model, x)))

    def test_frame_object_input(self):
        frame = gen_sequence('rigid', SequenceParams(height=16, width=16, length=2, object_size=(6, 6),
                                                     object_velocity=(1.0, 0.0)), 0).frames[0]
        self.assertEqual(tuple(forward_masks(self.model, frame).shape), (3, 16, 16))

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            forward_masks(self.model, torch.rand(3, 20, 16))

    def test_predict_keeps_training_flag(self):
        self.model.train()
        masks = self.model.predict([torch.rand(3, 16, 16) for _ in range(5)], batch=2)
        self.assertEqual(tuple(masks.shape), (5, 3, 16, 16))
        self.assertTrue(self.model.training)


class Test_forward_residual(unittest.TestCase):

    def test_bounded_by_lambda(self):
        torch.manual_seed(0)
        model = SegModel(tiny_config(lam=10.0), (16, 16))
        R = forward_residual(model, torch.rand(3, 16, 16), torch.rand(3, 16, 16))
        self.assertEqual(tuple(R.shape), (3, 2, 16, 16))
        self.assertLess(R.abs().max().item(), 10.0)

    def test_saturated_head_stays_inside_the_bound(self):
        for lam in (1.0, 10.0):
            model = SegModel(tiny_config(lam=lam), (16, 16))
            with torch.no_grad():
                model.res_head[-1].weight.zero_()
                model.res_head[-1].bias.fill_(50.0)
            R = forward_residual(model, torch.rand(3, 16, 16), torch.rand(3, 16, 16))
            self.assertEqual(R.dtype, torch.float32)
            self.assertLess(R.abs().max().item(), lam)
            self.assertGreater(R.min().item(), 0.999 * lam)

    def test_zero_output_layer(self):
        model = SegModel(tiny_config(res_init_scale=0.0), (16, 16))
        R = forward_residual(model, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16))
        self.assertEqual(R.abs().max().item(), 0.0)

    def test_zero_lambda(self):
        model = SegModel(tiny_config(lam=0.0), (16, 16))
        R = forward_residual(model, torch.rand(3, 16, 16), torch.rand(3, 16, 16))
        self.assertEqual(R.abs().max().item(), 0.0)


class Test_poly_lr(unittest.TestCase):

    def test_endpoints(self):
        self.assertEqual(poly_lr(0, 100, 1e-4, 1e-6), 1e-4)
        self.assertAlmostEqual(poly_lr(100, 100, 1e-4, 1e-6), 1e-6)

    def test_monotone_decay(self):
        values = [poly_lr(s, 50, 1e-3, 1e-5) for s in range(51)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_no_steps(self):
        self.assertEqual(poly_lr(0, 0, 1e-4, 1e-6), 1e-4)


class Test_batch_indices(unittest.TestCase):

    def test_each_pass_is_a_permutation(self):
        sampler = batch_indices(6, 3, seed=1)
        first_pass = next(sampler) + next(sampler)
        self.assertEqual(sorted(first_pass), list(range(6)))

    def test_seeded(self):
        a, b = batch_indices(10, 4, seed=2), batch_indices(10, 4, seed=2)
        self.assertEqual([next(a) for _ in range(5)], [next(b) for _ in range(5)])

    def test_batch_larger_than_dataset(self):
        self.assertEqual(len(next(batch_indices(2, 5, seed=0))), 5)


class Test_stage1_step(unittest.TestCase):

    def setUp(self):
        self.dataset = tiny_dataset()
        self.batch = to_tensors(self.dataset.batch([0, 4]))

    def test_zero_learning_rate(self):
        config = tiny_config(lr=0.0, min_lr=0.0)
        model = SegModel(config, (32, 32))
        before = [p.detach().clone() for p in model.parameters()]
        loss = stage1_step(model, self.batch, make_optimizer(model, config), config)
        self.assertTrue(math.isfinite(loss))
        for a, b in zip(before, model.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_loss_decreases_on_a_fixed_batch(self):
        torch.manual_seed(0)
        config = tiny_config(steps_stage1=20)
        model = SegModel(config, (32, 32))
        optimizer = make_optimizer(model, config)
        losses = [stage1_step(model, self.batch, optimizer, config, step) for step in range(20)]
        self.assertLess(losses[-1], losses[0])

    def test_non_finite_loss(self):
        config = tiny_config()
        model = SegModel(config, (32, 32))
        before = [p.detach().clone() for p in model.parameters()]
        batch = dict(self.batch)
        batch['flow'] = torch.full_like(batch['flow'], float('nan'))
        with self.assertRaises(DivergenceError) as ctx:
            stage1_step(model, batch, make_optimizer(model, config), config, step=7, recent=[1.0, 0.5])
        self.assertEqual(ctx.exception.step, 7)
        self.assertEqual(ctx.exception.recent_losses, (1.0, 0.5))
        for a, b in zip(before, model.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_flow_grid_mismatch(self):
        config = tiny_config()
        model = SegModel(config, (32, 32))
        batch = dict(self.batch)
        batch['flow'] = batch['flow'][..., :16]
        with self.assertRaises(ShapeError):
            stage1_loss(model, batch)

    def test_symmetric_loss_adds_the_backward_pair(self):
        torch.manual_seed(0)
        model = SegModel(tiny_config(symmetric_loss=True), (32, 32))
        outputs = model(self.batch['frame_t'], self.batch['frame_t1'])
        forward = stage1_loss(model, self.batch, False, outputs)
        both = stage1_loss(model, self.batch, True, outputs)
        self.assertGreater(both.item(), forward.item())


class Test_train_stage1(unittest.TestCase):

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            train_stage1(FramePairDataset([]), tiny_config())

    def test_checkpoint_content(self):
        config = tiny_config()
        ckpt = train_stage1(tiny_dataset(), config)
        self.assertEqual(ckpt.step, 3)
        self.assertIsNone(ckpt.object_channel)
        self.assertEqual(list(ckpt.history.columns), HISTORY_COLUMNS)
        self.assertEqual(ckpt.history['step'].tolist(), [0, 1, 2])
        for name, p in ckpt.model.named_parameters():
            self.assertTrue(torch.equal(ckpt.ema_state[name], p.detach()))

    def test_identical_seeds_identical_trajectories(self):
        a = train_stage1(tiny_dataset(), tiny_config(seed=4))
        b = train_stage1(tiny_dataset(), tiny_config(seed=4))
        self.assertEqual(a.history['loss'].tolist(), b.history['loss'].tolist())

    def test_divergence_attaches_partial_history(self):
        finite = stage1_loss
        calls = [0]

        def loss(*args, **kwargs):
            calls[0] += 1
            value = finite(*args, **kwargs)
            return value if calls[0] <= 2 else value * float('nan')

        with mock.patch('pyRCF.model.stage1_loss', new=loss):
            with self.assertRaises(DivergenceError) as ctx:
                train_stage1(tiny_dataset(), tiny_config(steps_stage1=5))
        history = ctx.exception.history
        self.assertEqual(ctx.exception.step, 2)
        self.assertEqual(list(history.columns), HISTORY_COLUMNS)
        self.assertEqual(history['step'].tolist(), [0, 1])
        self.assertEqual(tuple(history['loss']), ctx.exception.recent_losses)


class Test_ema_update(unittest.TestCase):

    def test_midpoint(self):
        out = ema_update({'w': torch.tensor(2.0)}, {'w': torch.tensor(4.0)}, 0.5)
        self.assertEqual(out['w'].item(), 3.0)

    def test_momentum_one_keeps_ema(self):
        out = ema_update({'w': torch.tensor([1.0, 2.0])}, {'w': torch.tensor([5.0, 6.0])}, 1.0)
        self.assertEqual(out['w'].tolist(), [1.0, 2.0])

    def test_momentum_zero_copies_params(self):
        out = ema_update({'w': torch.tensor([1.0, 2.0])}, {'w': torch.tensor([5.0, 6.0])}, 0.0)
        self.assertEqual(out['w'].tolist(), [5.0, 6.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            ema_update({'w': torch.zeros(2)}, {'w': torch.zeros(3)}, 0.5)

    def test_name_mismatch(self):
        with self.assertRaises(ShapeError):
            ema_update({'w': torch.zeros(2)}, {'v': torch.zeros(2)}, 0.5)


class Test_EMA(unittest.TestCase):

    def test_apply_and_restore(self):
        model = torch.nn.Linear(2, 1)
        ema = EMA(model, 0.5)
        ema.register()
        live = model.weight.detach().clone()
        with torch.no_grad():
            model.weight.add_(2.0)
        ema.update()
        self.assertTrue(torch.allclose(ema.shadow['weight'], live + 1.0))
        ema.apply_shadow()
        self.assertTrue(torch.allclose(model.weight, live + 1.0))
        ema.restore()
        self.assertTrue(torch.allclose(model.weight, live + 2.0))


class Test_grad_check(unittest.TestCase):

    def test_quadratic(self):
        x = torch.randn(6, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
        report = grad_check(lambda: (x ** 2).sum(), [x])
        self.assertEqual(report.n_checked, 6)
        self.assertLess(report.max_rel_error, 1e-6)

    def test_constant_loss(self):
        x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: torch.tensor(2.0, dtype=torch.float64), [x])
        self.assertEqual(report.max_abs_error, 0.0)

    def test_wrong_gradient_is_detected(self):
        x = torch.rand(4, dtype=torch.float64, generator=torch.Generator().manual_seed(1), requires_grad=True)
        report = grad_check(lambda: (x ** 2).sum() + (x.detach() ** 3).sum(), [x])
        self.assertFalse(report.passed(1e-3))

    def test_non_finite_loss(self):
        x = torch.ones(2, dtype=torch.float64, requires_grad=True)
        with self.assertRaises(ValueError):
            grad_check(lambda: torch.log(-x).sum(), [x])

    def test_max_checks(self):
        x = torch.ones(10, dtype=torch.float64, requires_grad=True)
        self.assertEqual(grad_check(lambda: (3 * x).sum(), [x], max_checks=4).n_checked, 4)

    def test_full_stage1_loss(self):
        checked = 0
        for seed in range(60):
            model, batch = gradient_instance(seed)
            if reconstruction_margin(model, batch) < 0.05:
                continue
            report = grad_check(lambda: stage1_loss(model, batch), list(model.parameters()), step=1e-4,
                                max_checks=25, seed=seed)
            self.assertTrue(report.passed(1e-3), f"seed {seed}: {report}")
            checked += 1
            if checked == GRADIENT_INSTANCES:
                break
        self.assertEqual(checked, GRADIENT_INSTANCES)


if __name__ == '__main__':
    unittest.main()
