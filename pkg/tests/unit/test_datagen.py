import unittest
import os
import tempfile
import numpy as np
import torch

from pyRCF.datagen import *
from pyRCF.motion import guided_pool
from pyRCF.errors import ConfigError, FormatError, ShapeError

SMALL = SequenceParams(height=32, width=32, length=4, object_velocity=(2.0, 0.0), object_size=(12, 12))


class Test_Frame___init__(unittest.TestCase):

    def test_valid_frame(self):
        frame = Frame(np.full((4, 5, 3), 0.5))
        self.assertEqual((frame.height, frame.width), (4, 5))
        self.assertEqual(frame.chw().shape, (3, 4, 5))
        self.assertEqual(frame.chw().dtype, np.float32)

    def test_values_outside_unit_interval(self):
        with self.assertRaises(ValueError):
            Frame(np.full((2, 2, 3), 1.5))

    def test_wrong_channel_count(self):
        with self.assertRaises(ShapeError):
            Frame(np.zeros((2, 2, 4)))

    def test_non_finite_values(self):
        data = np.zeros((2, 2, 3))
        data[0, 0, 0] = np.nan
        with self.assertRaises(ValueError):
            Frame(data)


class Test_FlowField___init__(unittest.TestCase):

    def test_components(self):
        flow = FlowField(np.stack([np.ones((2, 3)), -np.ones((2, 3))], axis=-1))
        self.assertTrue(np.all(flow.u == 1.0))
        self.assertTrue(np.all(flow.v == -1.0))
        self.assertEqual(flow.chw().shape, (2, 2, 3))

    def test_wrong_shape(self):
        with self.assertRaises(ShapeError):
            FlowField(np.zeros((2, 2, 3)))

    def test_infinite_values(self):
        with self.assertRaises(ValueError):
            FlowField(np.full((1, 1, 2), np.inf))


class Test_FeatureMap___init__(unittest.TestCase):

    def test_zero_vector(self):
        data = np.ones((2, 2, 3))
        data[1, 1] = 0.0
        with self.assertRaises(ValueError):
            FeatureMap(data)

    def test_vectors(self):
        features = FeatureMap(np.arange(1, 13, dtype=np.float32).reshape(2, 2, 3))
        self.assertEqual(features.dim, 3)
        self.assertEqual(features.vectors().shape, (4, 3))
        self.assertEqual(features.vectors()[1].tolist(), [4.0, 5.0, 6.0])


class Test_VideoSequence___init__(unittest.TestCase):

    def setUp(self):
        self.frames = [Frame(np.zeros((4, 4, 3))) for _ in range(3)]
        self.flows = [FlowField(np.zeros((4, 4, 2))) for _ in range(2)]

    def test_single_frame(self):
        with self.assertRaises(ConfigError):
            VideoSequence('one', self.frames[:1], [])

    def test_flow_count_mismatch(self):
        with self.assertRaises(ShapeError):
            VideoSequence('short', self.frames, self.flows[:1])

    def test_grid_mismatch(self):
        flows = [self.flows[0], FlowField(np.zeros((4, 5, 2)))]
        with self.assertRaises(ShapeError):
            VideoSequence('bad', self.frames, flows)

    def test_mask_count_mismatch(self):
        with self.assertRaises(ShapeError):
            VideoSequence('bad', self.frames, self.flows, gt_masks=[np.zeros((4, 4), dtype=bool)])

    def test_valid_sequence(self):
        seq = VideoSequence('ok', self.frames, self.flows)
        self.assertEqual(len(seq), 3)
        self.assertEqual(seq.grid, (4, 4))


class Test_Scenario_parse(unittest.TestCase):

    def test_case_insensitive(self):
        self.assertIs(Scenario.parse('ARTICULATED'), Scenario.ARTICULATED)
        self.assertIs(Scenario.parse(' static_object '), Scenario.STATIC_OBJECT)

    def test_member_passthrough(self):
        self.assertIs(Scenario.parse(Scenario.REFLECTION), Scenario.REFLECTION)

    def test_unknown_scenario(self):
        with self.assertRaises(ConfigError):
            Scenario.parse('occlusion')


class Test_SequenceParams___init__(unittest.TestCase):

    def test_length_below_two(self):
        with self.assertRaises(ConfigError):
            SequenceParams(length=1)

    def test_grid_not_multiple_of_stride(self):
        with self.assertRaises(ConfigError):
            SequenceParams(height=30, feature_stride=4)

    def test_negative_noise(self):
        with self.assertRaises(ConfigError):
            SequenceParams(flow_noise=-0.1)

    def test_tuples_are_normalized(self):
        params = SequenceParams(object_velocity=[1, 2], object_size=[8.0, 6.0])
        self.assertEqual(params.object_velocity, (1.0, 2.0))
        self.assertEqual(params.object_size, (8, 6))


class Test_flo(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'flow.flo')

    def tearDown(self):
        self.tmp.cleanup()

    # ======== write_flo TESTING ========

    def test_zero_field_size(self):
        write_flo(FlowField(np.zeros((2, 2, 2))), self.path)
        self.assertEqual(os.path.getsize(self.path), 44)
        with open(self.path, 'rb') as f:
            self.assertEqual(f.read(4), FLO_MAGIC_BYTES)

    def test_header_order(self):
        write_flo(FlowField(np.zeros((2, 3, 2))), self.path)
        with open(self.path, 'rb') as f:
            raw = f.read()
        self.assertEqual(np.frombuffer(raw, dtype='<i4', count=2, offset=4).tolist(), [3, 2])

    def test_nan_is_rejected_before_writing(self):
        flow = FlowField(np.zeros((2, 2, 2)))
        flow.data[0, 0, 0] = np.nan
        with self.assertRaises(ValueError):
            write_flo(flow, self.path)
        self.assertFalse(os.path.exists(self.path))

    # ======== read_flo TESTING ========

    def test_values_are_preserved(self):
        data = np.array([[[1.5, -2.0], [0.25, 3.0]]], dtype=np.float32)
        write_flo(FlowField(data), self.path)
        np.testing.assert_array_equal(read_flo(self.path).data, data)

    def test_bad_magic(self):
        with open(self.path, 'wb') as f:
            f.write(np.array([1.0], dtype='<f4').tobytes() + np.array([1, 1], dtype='<i4').tobytes() + bytes(8))
        with self.assertRaises(FormatError):
            read_flo(self.path)

    def test_truncated_payload(self):
        write_flo(FlowField(np.zeros((2, 2, 2))), self.path)
        with open(self.path, 'rb') as f:
            raw = f.read()
        with open(self.path, 'wb') as f:
            f.write(raw[:-4])
        with self.assertRaises(FormatError):
            read_flo(self.path)

    def test_short_header(self):
        with open(self.path, 'wb') as f:
            f.write(FLO_MAGIC_BYTES)
        with self.assertRaises(FormatError):
            read_flo(self.path)

    # ======== golden bytes TESTING ========

    def test_golden_bytes(self):
        golden = (b'PIEH' + b'\x02\x00\x00\x00' + b'\x01\x00\x00\x00'
                  + b'\x00\x00\x80\x3f' + b'\x00\x00\x00\xc0' + b'\x00\x00\x00\x3f' + b'\x00\x00\x00\x00')
        with open(self.path, 'wb') as f:
            f.write(golden)
        flow = read_flo(self.path)
        self.assertEqual(flow.data.shape, (1, 2, 2))
        self.assertEqual(flow.u.tolist(), [[1.0, 0.5]])
        self.assertEqual(flow.v.tolist(), [[-2.0, 0.0]])
        write_flo(flow, self.path)
        with open(self.path, 'rb') as f:
            self.assertEqual(f.read(), golden)


class Test_features_io(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'features.rcff')

    def tearDown(self):
        self.tmp.cleanup()

    def test_single_cell_size(self):
        write_features(FeatureMap(np.ones((1, 1, 1))), self.path)
        self.assertEqual(os.path.getsize(self.path), 20)
        with open(self.path, 'rb') as f:
            self.assertEqual(f.read(4), b'RCFF')

    def test_dim_is_fastest(self):
        data = np.arange(1, 13, dtype=np.float32).reshape(2, 2, 3)
        write_features(FeatureMap(data), self.path)
        with open(self.path, 'rb') as f:
            raw = f.read()
        self.assertEqual(np.frombuffer(raw, dtype='<u4', count=3, offset=4).tolist(), [2, 2, 3])
        self.assertEqual(np.frombuffer(raw, dtype='<f4', count=3, offset=16).tolist(), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(read_features(self.path).data, data)

    def test_bad_magic(self):
        with open(self.path, 'wb') as f:
            f.write(b'XXXX' + bytes(16))
        with self.assertRaises(FormatError):
            read_features(self.path)

    def test_golden_bytes(self):
        golden = (b'RCFF' + b'\x01\x00\x00\x00' + b'\x02\x00\x00\x00' + b'\x02\x00\x00\x00'
                  + b'\x00\x00\x80\x3f' + b'\x00\x00\x00\x3f' + b'\x00\x00\x00\xc0' + b'\x00\x00\x00\x00')
        with open(self.path, 'wb') as f:
            f.write(golden)
        features = read_features(self.path)
        self.assertEqual(features.data.tolist(), [[[1.0, 0.5], [-2.0, 0.0]]])
        write_features(features, self.path)
        with open(self.path, 'rb') as f:
            self.assertEqual(f.read(), golden)

    def test_size_mismatch(self):
        with open(self.path, 'wb') as f:
            f.write(b'RCFF' + np.array([1, 1, 2], dtype='<u4').tobytes() + np.ones(1, dtype='<f4').tobytes())
        with self.assertRaises(FormatError):
            read_features(self.path)


class Test_pnm(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_header_with_comment(self):
        path = os.path.join(self.dir, 'c.pgm')
        with open(path, 'wb') as f:
            f.write(b'P5\n# a comment\n2 1\n255\n' + bytes([0, 255]))
        self.assertEqual(read_pnm(path).tolist(), [[0, 255]])
        self.assertEqual(read_mask(path).tolist(), [[False, True]])

    def test_unsupported_maxval(self):
        path = os.path.join(self.dir, 'm.pgm')
        with open(path, 'wb') as f:
            f.write(b'P5\n1 1\n65535\n' + bytes(2))
        with self.assertRaises(FormatError):
            read_pnm(path)

    def test_mask_with_gray_values(self):
        path = os.path.join(self.dir, 'g.pgm')
        write_pnm(np.array([[0, 128]], dtype=np.uint8), path)
        with self.assertRaises(FormatError):
            read_mask(path)

    def test_frame_quantization(self):
        path = os.path.join(self.dir, 'f.ppm')
        frame = Frame(np.random.default_rng(0).uniform(size=(3, 4, 3)))
        write_frame(frame, path)
        np.testing.assert_allclose(read_frame(path).data, frame.data, atol=0.5 / 255 + 1e-12)

    def test_frame_must_be_color(self):
        path = os.path.join(self.dir, 'gray.pgm')
        write_mask(np.ones((2, 2), dtype=bool), path)
        with self.assertRaises(FormatError):
            read_frame(path)


class Test_gen_sequence(unittest.TestCase):

    # ======== determinism TESTING ========

    def test_same_seed_same_sequence(self):
        a = gen_sequence('rigid', SMALL, seed=3)
        b = gen_sequence('rigid', SMALL, seed=3)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.data, fb.data)
        for fa, fb in zip(a.features, b.features):
            np.testing.assert_array_equal(fa.data, fb.data)

    def test_different_seeds_differ(self):
        a = gen_sequence('rigid', SMALL, seed=3)
        b = gen_sequence('rigid', SMALL, seed=4)
        self.assertFalse(np.array_equal(a.frames[0].data, b.frames[0].data))

    def test_sequence_name(self):
        self.assertEqual(gen_sequence(Scenario.REFLECTION, SMALL, seed=7).name, 'reflection_7')

    # ======== rigid TESTING ========

    def test_rigid_flow_is_piecewise_constant(self):
        seq = gen_sequence('rigid', SMALL, seed=0)
        self.assertEqual(len(seq.frames), 4)
        self.assertEqual(len(seq.flows), 3)
        for t, flow in enumerate(seq.flows):
            mask = seq.gt_masks[t]
            self.assertTrue(mask.any())
            np.testing.assert_array_equal(flow.data[mask], np.tile([2.0, 0.0], (mask.sum(), 1)))
            np.testing.assert_array_equal(flow.data[~mask], np.tile([-1.0, 0.0], ((~mask).sum(), 1)))

    def test_rigid_object_texture_moves_with_the_flow(self):
        seq = gen_sequence('rigid', SMALL, seed=0)
        ys, xs = np.nonzero(seq.gt_masks[0])
        np.testing.assert_allclose(seq.frames[1].data[ys, xs + 2], seq.frames[0].data[ys, xs], atol=1e-12)

    def test_backward_flow_negates_the_motion(self):
        seq = gen_sequence('rigid', SMALL, seed=0)
        mask = seq.gt_masks[1]
        np.testing.assert_array_equal(seq.backward_flows[0].data[mask], np.tile([-2.0, 0.0], (mask.sum(), 1)))

    def test_flow_noise_keeps_ground_truth(self):
        seq = gen_sequence('rigid', with_params(SMALL, flow_noise=0.5), seed=0)
        self.assertFalse(np.array_equal(seq.flows[0].data, seq.gt_flows[0].data))
        mask = seq.gt_masks[0]
        np.testing.assert_array_equal(seq.gt_flows[0].data[mask], np.tile([2.0, 0.0], (mask.sum(), 1)))

    # ======== articulated TESTING ========

    def test_articulated_leg_moves_relative_to_body(self):
        seq = gen_sequence('articulated', SMALL, seed=0)
        for flow, gt in zip(seq.flows, seq.gt_masks):
            self.assertEqual(np.unique(flow.u[gt]).tolist(), [2.0, 4.0])
            self.assertEqual(np.unique(flow.v[gt]).tolist(), [0.0])

    def test_articulated_leg_drifts_by_delta_per_frame(self):
        params = with_params(SMALL, length=5, object_velocity=(1.0, 0.0), delta=(1.5, -0.5))
        seq = gen_sequence('articulated', params, seed=1)
        for flow, gt in zip(seq.flows, seq.gt_masks):
            pairs = {tuple(uv) for uv in flow.data[gt].tolist()}
            self.assertEqual(pairs, {(1.0, 0.0), (2.5, -0.5)})

    def test_pooled_ground_truth_flow_is_the_area_weighted_mean(self):
        seq = gen_sequence('articulated', SMALL, seed=3)
        for flow, gt in zip(seq.flows, seq.gt_masks):
            leg = gt & (flow.u == 4.0)
            expected = (2.0 * (gt.sum() - leg.sum()) + 4.0 * leg.sum()) / gt.sum()
            pooled = guided_pool(torch.from_numpy(flow.data).permute(2, 0, 1), torch.from_numpy(gt.astype(np.float64)))
            np.testing.assert_allclose(pooled.numpy(), [expected, 0.0], atol=1e-9)

    def test_delta_above_bound(self):
        with self.assertRaises(ConfigError):
            gen_sequence('articulated', with_params(SMALL, delta=(5.0, 0.0)), seed=0)

    # ======== reflection TESTING ========

    def test_reflection_is_outside_ground_truth(self):
        seq = gen_sequence('reflection', SMALL, seed=0)
        for gt, mirror in zip(seq.gt_masks, seq.mirror_masks):
            self.assertTrue(mirror.any())
            self.assertFalse(np.any(gt & mirror))

    def test_reflection_features_resemble_background(self):
        seq = gen_sequence('reflection', with_params(SMALL, feature_noise=0.0), seed=0)
        s = SMALL.feature_stride
        cells_mirror = seq.mirror_masks[0][s // 2::s, s // 2::s]
        cells_gt = seq.gt_masks[0][s // 2::s, s // 2::s]
        cells_bg = ~(cells_mirror | cells_gt)
        data = seq.features[0].data
        mirror, background, obj = data[cells_mirror][0], data[cells_bg][0], data[cells_gt][0]

        def cos(a, b):
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

        self.assertGreater(cos(mirror, background), 0.98)
        self.assertLess(abs(cos(obj, background)), 1e-5)

    # ======== static object TESTING ========

    def test_static_object_has_zero_flow(self):
        seq = gen_sequence('static_object', SMALL, seed=0)
        for flow in seq.flows:
            self.assertTrue(np.all(flow.data == 0.0))
        self.assertTrue(seq.gt_masks[0].any())

    # ======== invalid scripts TESTING ========

    def test_object_larger_than_frame(self):
        with self.assertRaises(ConfigError):
            gen_sequence('rigid', with_params(SMALL, object_size=(40, 40)), seed=0)

    def test_object_leaves_the_frame(self):
        with self.assertRaises(ConfigError):
            gen_sequence('rigid', with_params(SMALL, length=20, object_velocity=(4.0, 0.0)), seed=0)

    def test_feature_grid(self):
        seq = gen_sequence('rigid', SMALL, seed=0)
        self.assertEqual(seq.features[0].data.shape, (8, 8, SMALL.feature_dim))


class Test_FramePairDataset(unittest.TestCase):

    def setUp(self):
        self.sequences = synthetic_dataset('rigid', SMALL, [0, 1])

    def test_length_counts_pairs(self):
        dataset = FramePairDataset(self.sequences)
        self.assertEqual(len(dataset), 6)
        self.assertEqual(dataset.index[3], (1, 0))
        self.assertTrue(dataset.has_features)

    def test_batch_shapes(self):
        batch = FramePairDataset(self.sequences).batch([0, 4])
        self.assertEqual(batch['frame_t'].shape, (2, 3, 32, 32))
        self.assertEqual(batch['flow'].shape, (2, 2, 32, 32))
        self.assertEqual(batch['backward_flow'].shape, (2, 2, 32, 32))
        self.assertEqual(len(batch['features']), 2)
        self.assertEqual(batch['indices'], [0, 4])

    def test_pair_content(self):
        dataset = FramePairDataset(self.sequences)
        pair = dataset[4]
        np.testing.assert_array_equal(pair.frame_t1, self.sequences[1].frames[2].chw())
        np.testing.assert_array_equal(pair.flow, self.sequences[1].flows[1].chw())

    def test_mixed_grids(self):
        other = gen_sequence('rigid', SequenceParams(length=2), seed=0)
        with self.assertRaises(ShapeError):
            FramePairDataset([self.sequences[0], other])


class Test_directory_layout(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_then_load(self):
        seq = gen_sequence('articulated', SMALL, seed=2)
        rows = write_sequence(seq, self.dir, write_backward=True)
        write_manifest(rows, self.dir)
        self.assertTrue(os.path.isfile(os.path.join(self.dir, 'articulated_2', 'flow_000.flo')))
        self.assertTrue(os.path.isfile(os.path.join(self.dir, 'articulated_2', 'backflow_002.flo')))

        (loaded,) = load_sequences(self.dir)
        self.assertEqual(loaded.name, 'articulated_2')
        self.assertEqual(len(loaded.frames), 4)
        for a, b in zip(loaded.flows, seq.flows):
            np.testing.assert_array_equal(a.data, b.data)
        for a, b in zip(loaded.gt_masks, seq.gt_masks):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.features, seq.features):
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_allclose(loaded.frames[1].data, seq.frames[1].data, atol=0.5 / 255 + 1e-12)
        self.assertIsNotNone(loaded.backward_flows)

    def test_without_backward_flows(self):
        seq = gen_sequence('rigid', SMALL, seed=0)
        write_manifest(write_sequence(seq, self.dir), self.dir)
        dataset = FramePairDataset.from_directory(self.dir)
        self.assertEqual(len(dataset), 3)
        self.assertIsNone(dataset.batch([0])['backward_flow'])

    def test_missing_manifest(self):
        with self.assertRaises(ConfigError):
            load_sequences(self.dir)


if __name__ == '__main__':
    unittest.main()
