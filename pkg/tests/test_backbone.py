import numpy as np
import pytest

from routedistill import backbone as B
from routedistill import tensor as T
from routedistill.optim import TrainSchedule
from routedistill.tensor import Tensor
from routedistill.world import WorldConfig, make_dataset, stack_episodes


def small_cfg(**kw):
    base = dict(
        layers=2, width=16, n_heads=2, d_in=16, d_l=17,
        capsule_dim=8, ff_mult=2, head_hidden=16, seed=3,
    )
    base.update(kw)
    return B.BackboneConfig(**base)


def test_config_invariants():
    with pytest.raises(ValueError):
        small_cfg(width=15)  # not divisible by heads
    with pytest.raises(ValueError):
        small_cfg(layers=1)
    with pytest.raises(ValueError):
        small_cfg(capsule_dim=99)


class TestEncode:
    def test_output_shapes(self):
        bb = B.init_backbone(small_cfg(width=32))
        enc = B.encode(bb, np.zeros((6, 16)), np.zeros(17))
        assert enc.v_e.shape == (6, 32)
        assert enc.l_e.shape == (1, 32)

    def test_zero_inputs_zero_bias_give_zero_embeddings(self):
        bb = B.init_backbone(small_cfg())
        enc = B.encode(bb, np.zeros((6, 16)), np.zeros(17))
        assert np.all(enc.v_e.data == 0)
        assert np.all(enc.l_e.data == 0)

    def test_identical_inputs_identical_embeddings(self):
        bb = B.init_backbone(small_cfg())
        rng = np.random.default_rng(0)
        v, l = rng.standard_normal((6, 16)), rng.standard_normal(17)
        a = B.encode(bb, v, l)
        b = B.encode(bb, v, l)
        assert a.v_e.data.tobytes() == b.v_e.data.tobytes()

    def test_dim_mismatch_rejected(self):
        bb = B.init_backbone(small_cfg())
        with pytest.raises(T.ShapeError):
            B.encode(bb, np.zeros((6, 5)), np.zeros(17))
        with pytest.raises(T.ShapeError):
            B.encode(bb, np.zeros((6, 16)), np.zeros(3))


class TestTrunk:
    def test_layer_count_and_shapes(self):
        bb = B.init_backbone(small_cfg())
        states = B.forward_all_layers(bb, B.encode(bb, np.random.default_rng(0).standard_normal((6, 16)), np.zeros(17)))
        assert len(states) == 2
        assert all(h.shape == (7, 16) for h in states)

    def test_zero_weights_residual_identity(self):
        bb = B.init_backbone(small_cfg())
        for lp in bb.layers:
            for name in ("wq", "wk", "wv", "wo", "bo", "w1", "b1", "w2", "b2"):
                getattr(lp, name).data[...] = 0.0
        rng = np.random.default_rng(1)
        enc = B.encode(bb, rng.standard_normal((6, 16)), rng.standard_normal(17))
        states = B.forward_all_layers(bb, enc)
        assert np.array_equal(states[-1].data, B.fuse(enc).data)

    def test_fixed_seed_bit_identical_states(self):
        rng = np.random.default_rng(2)
        v, l = rng.standard_normal((6, 16)), rng.standard_normal(17)
        s1 = B.forward_all_layers(B.init_backbone(small_cfg()), B.encode(B.init_backbone(small_cfg()), v, l))
        s2 = B.forward_all_layers(B.init_backbone(small_cfg()), B.encode(B.init_backbone(small_cfg()), v, l))
        assert s1[-1].data.tobytes() == s2[-1].data.tobytes()

    def test_batched_matches_unbatched(self):
        bb = B.init_backbone(small_cfg())
        rng = np.random.default_rng(3)
        v = rng.standard_normal((4, 6, 16))
        l = rng.standard_normal((4, 17))
        batched = B.forward_all_layers(bb, B.encode(bb, v, l))[-1]
        for b in range(4):
            single = B.forward_all_layers(bb, B.encode(bb, v[b], l[b]))[-1]
            np.testing.assert_array_equal(batched.data[b], single.data)


class TestActionHead:
    def test_zero_state_zero_bias_head_zero_action(self):
        bb = B.init_backbone(small_cfg())
        bb.head.w2.data[...] = 0.0
        bb.head.b2.data[...] = 0.0
        act = B.native_action_head(bb, Tensor(np.zeros((7, 16))))
        assert np.all(act.data == 0)
        assert act.shape == (7,)

    def test_copied_head_weights_identical_outputs(self):
        bb1 = B.init_backbone(small_cfg(seed=1))
        bb2 = B.init_backbone(small_cfg(seed=2))
        for name in ("w1", "b1", "w2", "b2"):
            getattr(bb2.head, name).data[...] = getattr(bb1.head, name).data
        h = Tensor(np.random.default_rng(5).standard_normal((7, 16)))
        assert np.array_equal(
            B.native_action_head(bb1, h).data, B.native_action_head(bb2, h).data
        )


class TestTeacherTraining:
    def dataset(self, n=8):
        wc = WorldConfig(n_tokens=6, token_dim=16, n_objects=3, noise_std=0.1, seed=7)
        return make_dataset(wc, n)

    def sched(self, epochs, **kw):
        base = dict(epochs=epochs, batch=4, base_lr=2e-3, warmup=2, cosine=False, clip=1.0, seed=0)
        base.update(kw)
        return TrainSchedule(**base)

    def test_loss_mostly_decreases_early(self):
        bb = B.init_backbone(small_cfg())
        ds = self.dataset(1)
        curve = B.train_teacher(bb, ds.episodes, self.sched(12, batch=1, warmup=1))
        first = [v for _, v in curve[:10]]
        drops = sum(b < a for a, b in zip(first, first[1:]))
        assert drops >= 6

    def test_zero_epochs_keeps_initialization(self):
        bb = B.init_backbone(small_cfg())
        before = B.backbone_hash(bb)
        curve = B.train_teacher(bb, self.dataset().episodes, self.sched(0))
        assert curve == []
        assert B.backbone_hash(bb) == before

    def test_same_seed_identical_losses(self):
        c1 = B.train_teacher(B.init_backbone(small_cfg()), self.dataset().episodes, self.sched(2))
        c2 = B.train_teacher(B.init_backbone(small_cfg()), self.dataset().episodes, self.sched(2))
        assert c1 == c2


def test_clone_is_bit_identical_and_independent():
    bb = B.init_backbone(small_cfg())
    clone = B.clone_backbone(bb)
    assert B.backbone_hash(clone) == B.backbone_hash(bb)
    clone.layers[0].wq.data += 1.0
    assert B.backbone_hash(clone) != B.backbone_hash(bb)


def test_parameter_names_follow_layer_scheme():
    bb = B.init_backbone(small_cfg())
    names = set(B.backbone_tensors(bb))
    assert "backbone/layer0/wq" in names
    assert "backbone/layer1/ffn_w2" in names
    assert "backbone/head/w2" in names
