import math

import numpy as np
import pytest

from dancelab import numkernel as nk
from dancelab.model import (ModelConfig, bn_equal, bn_snapshot, classify, forward_features,
                            init_model, load_checkpoint, model_backward, normalized_prototypes,
                            save_checkpoint, state_tensors)
from gradcheck import check_model_cls, check_prototype_norm, run_checks


def small(seed=0, **kw):
    base = dict(input_dim=4, num_classes=3, hidden_dims=(6, 5), feat_dim=4, seed=seed)
    base.update(kw)
    return init_model(ModelConfig(**base))


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = small(3), small(3)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_different_seed_differs(self):
        assert not np.array_equal(small(1).params["fc0.W"], small(2).params["fc0.W"])

    def test_prototypes_unit_norm(self):
        W = small().prototypes
        assert W.shape == (3, 4)
        np.testing.assert_allclose(np.linalg.norm(W, axis=1), 1.0, atol=1e-12)

    def test_two_bn_states_per_layer(self):
        m = small()
        assert len(m.bn) == 2
        for layer in m.bn:
            assert set(layer) == {"source", "target"}
            assert layer["source"].running_mean is not layer["target"].running_mean

    @pytest.mark.parametrize("kw", [dict(feat_dim=1), dict(num_classes=1), dict(tau_nc=0.0),
                                    dict(tau_cls=-1.0), dict(hidden_dims=(0,))])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            small(**kw)

    def test_empty_hidden_is_single_affine(self):
        m = small(hidden_dims=())
        X = np.random.default_rng(0).normal(size=(5, 4))
        f, _ = forward_features(m, X, "source", training=True)
        raw = X @ m.params["fc_out.W"] + m.params["fc_out.b"]
        np.testing.assert_allclose(f, raw / np.linalg.norm(raw, axis=1, keepdims=True), atol=1e-14)


class TestForward:
    def test_unit_norm_rows(self):
        m = small()
        X = np.random.default_rng(1).normal(size=(7, 4))
        for training in (True, False):
            f, _ = forward_features(m, X, "target", training)
            np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)

    def test_source_target_identical_at_init(self):
        m = small()
        X = np.random.default_rng(2).normal(size=(6, 4))
        fs, _ = forward_features(m, X, "source", training=True)
        ft, _ = forward_features(m, X, "target", training=True)
        np.testing.assert_array_equal(fs, ft)

    def test_running_stats_diverge_on_distinct_data(self):
        m = small()
        rng = np.random.default_rng(3)
        forward_features(m, rng.normal(size=(8, 4)), "source", training=True)
        forward_features(m, rng.normal(size=(8, 4)) + 2.0, "target", training=True)
        assert not np.allclose(m.bn[0]["source"].running_mean, m.bn[0]["target"].running_mean)

    def test_domain_isolation(self):
        m = small(hidden_dims=(16, 16))
        rng = np.random.default_rng(4)
        before = bn_snapshot(m, "target")
        forward_features(m, rng.normal(size=(8, 4)), "source", training=True)
        assert bn_equal(before, bn_snapshot(m, "target"))
        before = bn_snapshot(m, "source")
        forward_features(m, rng.normal(size=(8, 4)), "target", training=True)
        assert bn_equal(before, bn_snapshot(m, "source"))

    def test_inference_does_not_touch_stats(self):
        m = small()
        before = bn_snapshot(m, "source")
        forward_features(m, np.ones((3, 4)), "source", training=False)
        assert bn_equal(before, bn_snapshot(m, "source"))

    def test_errors(self):
        m = small()
        with pytest.raises(nk.ShapeError):
            forward_features(m, np.ones((3, 5)), "source", True)
        with pytest.raises(nk.DegenerateInputError):
            forward_features(m, np.ones((1, 4)), "source", True)
        with pytest.raises(ValueError):
            forward_features(m, np.ones((3, 4)), "test", True)


class TestClassify:
    def test_matching_prototype_wins(self):
        m = small(num_classes=4, tau_cls=1.0)
        m.params["proto.W"][:] = np.eye(4)
        f = np.array([[0.0, 0.0, 1.0, 0.0]])
        logits, p = classify(m, f)
        assert np.argmax(p) == 2
        np.testing.assert_allclose(logits, [[0, 0, 1, 0]])

    def test_identical_prototypes_give_uniform(self):
        m = small()
        m.params["proto.W"][:] = m.params["proto.W"][0]
        f = nk.l2_normalize_rows(np.random.default_rng(0).normal(size=(3, 4)))[0]
        np.testing.assert_allclose(classify(m, f)[1], 1.0 / 3.0, atol=1e-15)

    def test_equidistant_feature_entropy_log_k(self):
        m = small(num_classes=3)
        m.params["proto.W"][:] = np.eye(4)[:3]
        f = np.array([[0.0, 0.0, 0.0, 1.0]])
        H = nk.row_entropy(classify(m, f)[1])
        assert H[0] == pytest.approx(math.log(3), abs=1e-12)

    def test_argmax_invariant_to_temperature(self):
        rng = np.random.default_rng(5)
        f = nk.l2_normalize_rows(rng.normal(size=(20, 4)))[0]
        a, b = small(tau_cls=0.05), small(tau_cls=2.0)
        b.params["proto.W"][:] = a.params["proto.W"]
        assert np.array_equal(classify(a, f)[1].argmax(1), classify(b, f)[1].argmax(1))


class TestPrototypes:
    def test_unit_rows_unchanged(self):
        m = small()
        np.testing.assert_allclose(normalized_prototypes(m)[0], m.prototypes, atol=1e-15)

    def test_scale_invariant_and_copy(self):
        m = small()
        ref = normalized_prototypes(m)[0].copy()
        m.params["proto.W"][1] *= 10.0
        raw = m.params["proto.W"].copy()
        Wh = normalized_prototypes(m)[0]
        np.testing.assert_allclose(Wh, ref, atol=1e-15)
        np.testing.assert_array_equal(m.params["proto.W"], raw)

    def test_zero_row_rejected(self):
        m = small()
        m.params["proto.W"][0] = 0.0
        with pytest.raises(nk.DegenerateInputError):
            normalized_prototypes(m)

    def test_gradient_fd(self):
        assert max(run_checks(check_prototype_norm)) <= 1e-4


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        m = small()
        f, cache = forward_features(m, np.random.default_rng(0).normal(size=(4, 4)), "source", True)
        grads = model_backward(m, cache, np.zeros_like(f), np.zeros((4, 3)))
        assert all(not g.any() for g in grads.values())

    def test_all_params_fd(self):
        assert max(run_checks(check_model_cls)) <= 1e-4

    def test_repeatable(self):
        m = small()
        X = np.random.default_rng(0).normal(size=(4, 4))
        G = np.random.default_rng(1).normal(size=(4, 3))
        out = []
        for _ in range(2):
            f, cache = forward_features(m, X, "source", True)
            out.append(model_backward(m, cache, grad_logits=G))
        for k in out[0]:
            assert np.array_equal(out[0][k], out[1][k])

    def test_stale_cache_shape(self):
        m = small()
        f, cache = forward_features(m, np.ones((3, 4)) * np.arange(3)[:, None], "source", True)
        with pytest.raises(nk.ShapeError):
            model_backward(m, cache, np.zeros((5, 4)))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = small(7)
        rng = np.random.default_rng(0)
        forward_features(m, rng.normal(size=(6, 4)), "target", training=True)
        for v in m.params.values():
            v += rng.normal(scale=1e-3, size=v.shape)
        path = save_checkpoint(m, tmp_path / "m.json")
        back = load_checkpoint(path)
        a, b = state_tensors(m), state_tensors(back)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]), k
        assert back.config == m.config

    def test_loaded_bn_shares_affine(self, tmp_path):
        back = load_checkpoint(save_checkpoint(small(), tmp_path / "m.json"))
        assert back.bn[0]["target"].gamma is back.params["bn0.gamma"]

    def test_bad_format(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"format": "other"}')
        with pytest.raises(ValueError, match="not a"):
            load_checkpoint(p)
