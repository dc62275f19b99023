import numpy as np
import pytest

from dfptkd import models
from dfptkd.checkpoint import BadMagicError, CheckpointError
from dfptkd.models import (ArchMismatchError, UnknownArchitectureError, analytic_param_count, arch_spec, build,
                           forward_staged, load_checkpoint, read_checkpoint, save_checkpoint, zoo_names)
from dfptkd.nn import Sequential
from dfptkd.tensor import ShapeError, Tensor


def batch(spec, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, spec.in_channels, spec.input_size, spec.input_size)).astype(np.float32))


class TestBuild:
    @pytest.mark.parametrize("name", zoo_names())
    def test_analytic_count_matches_enumeration(self, name):
        m = build(name)
        assert m.num_parameters() == analytic_param_count(name)

    def test_frozen_counts(self):
        # closed-form layer arithmetic, frozen
        assert analytic_param_count("tiny-resnet-T") == 290_090
        assert analytic_param_count("tiny-resnet-S") == 41_590
        assert analytic_param_count("resnet8x4") == 1_233_540
        assert analytic_param_count("resnet32x4") == 7_433_860

    def test_resnet14x4_size(self):
        # published size 2.78M
        assert round(analytic_param_count("resnet14x4") / 1e6, 2) == 2.78

    def test_tiny_resnet_teacher_formula(self):
        def conv_bn(i, o, k=3):
            return k * k * i * o + 2 * o

        def down_block(i, o):
            return conv_bn(i, o) + conv_bn(o, o) + conv_bn(i, o, 1)

        expect = conv_bn(3, 32) + down_block(32, 64) + down_block(64, 128) + 128 * 10 + 10
        assert build("tiny-resnet-T").num_parameters() == expect

    def test_student_much_smaller(self):
        for t, s in (("tiny-resnet-T", "tiny-resnet-S"), ("tiny-vgg-T", "tiny-vgg-S")):
            ratio = analytic_param_count(t) / analytic_param_count(s)
            assert 4 <= ratio <= 8

    def test_cifar_resnets_have_four_stages(self):
        for name in ("resnet8x4", "resnet32x4"):
            assert build(name).num_stages == 4

    def test_same_seed_identical(self):
        a, b = build("tiny-resnet-S", seed=3), build("tiny-resnet-S", seed=3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and va.tobytes() == vb.tobytes()
        c = build("tiny-resnet-S", seed=4)
        assert any(not np.array_equal(x, y) for x, y in zip(a.state_dict().values(), c.state_dict().values()))

    def test_unknown(self):
        with pytest.raises(UnknownArchitectureError):
            build("resnet9000")

    def test_overrides(self):
        spec = arch_spec("tiny-vgg-S", num_classes=4, input_size=8, in_channels=1)
        m = build(spec)
        out = m(batch(spec))
        assert out.shape == (2, 4)

    def test_partition_exhaustive(self):
        m = build("tiny-resnet-T")
        stage_ids = {id(p) for s in m.stages for p in s.parameters()}
        head_ids = {id(p) for p in m.head.parameters()}
        all_ids = {id(p) for p in m.parameters()}
        assert not stage_ids & head_ids and stage_ids | head_ids == all_ids


class TestForwardStaged:
    @pytest.mark.parametrize("name", ["tiny-resnet-T", "tiny-vgg-S", "resnet8x4"])
    def test_matches_plain_forward(self, name):
        m = build(name).eval()
        x = batch(m.spec)
        feats, z = forward_staged(m, x)
        assert z.data.tobytes() == m(x).data.tobytes()
        assert [f.shape[1] for f in feats] == list(m.stage_channels)
        assert len(feats) == m.num_stages

    def test_eval_deterministic(self):
        m = build("tiny-resnet-S").eval()
        x = batch(m.spec)
        assert np.array_equal(m(x).data, m(x).data)

    def test_shape_mismatch(self):
        m = build("tiny-resnet-S")
        with pytest.raises(ShapeError):
            m(Tensor(np.zeros((1, 1, 16, 16), np.float32)))

    def test_needs_two_stages(self):
        spec = arch_spec("tiny-resnet-S")
        with pytest.raises(ValueError):
            models.StagedModel(spec, [Sequential()], models.Head(12, 10))


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        m = build("tiny-resnet-S", seed=7)
        m.stages[0].layers[1].running_mean[:] = 0.25
        save_checkpoint(m, tmp_path / "m.ckpt", metrics={"top1": 0.5}, seed=7)
        back = load_checkpoint(tmp_path / "m.ckpt")
        for (ka, va), (kb, vb) in zip(m.state_dict().items(), back.state_dict().items()):
            assert ka == kb and va.dtype == vb.dtype and va.tobytes() == vb.tobytes()
        ck = read_checkpoint(tmp_path / "m.ckpt")
        assert ck.arch == "tiny-resnet-S" and ck.metrics == {"top1": 0.5} and ck.seed == 7

    def test_float64_roundtrip(self, tmp_path):
        m = build("tiny-vgg-S", seed=1, dtype=np.float64)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert all(v.dtype == np.float64 for k, v in back.state_dict().items() if "weight" in k)
        x = Tensor(np.random.default_rng(0).random((2, 3, 16, 16)))
        assert np.array_equal(m.eval()(x).data, back.eval()(x).data)

    def test_wrong_arch(self, tmp_path):
        save_checkpoint(build("tiny-resnet-S"), tmp_path / "m.ckpt")
        with pytest.raises(ArchMismatchError):
            load_checkpoint(tmp_path / "m.ckpt", arch="tiny-resnet-T")

    def test_truncated(self, tmp_path):
        save_checkpoint(build("tiny-resnet-S"), tmp_path / "m.ckpt")
        buf = (tmp_path / "m.ckpt").read_bytes()
        for cut in (2, 100, len(buf) // 2, len(buf) - 1):
            (tmp_path / "t.ckpt").write_bytes(buf[:cut])
            with pytest.raises((BadMagicError, CheckpointError)):
                load_checkpoint(tmp_path / "t.ckpt")
