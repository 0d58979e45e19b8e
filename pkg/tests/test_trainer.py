import math

import numpy as np
import pytest

from dancelab.model import init_model
from dancelab.synthdata import BenchmarkConfig, synth_office
from dancelab.trainer import (LOG_COLUMNS, DanceObjective, EpochSampler, SourceOnlyObjective,
                              TrainConfig, config_dict, export_features, fit, read_log, write_log)

SMALL = BenchmarkConfig(n_per_class=30)


def cfg(**kw):
    base = dict(total_iters=60, hidden_dims=(32,), feat_dim=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def oda():
    return synth_office("ODA", 0, SMALL)


def params_equal(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def separation_ratio(F, y):
    """Between-class over within-class scatter (trace form)."""
    mu = F.mean(axis=0)
    between = within = 0.0
    for c in np.unique(y):
        Fc = F[y == c]
        between += len(Fc) * np.sum((Fc.mean(0) - mu) ** 2)
        within += np.sum((Fc - Fc.mean(0)) ** 2)
    return between / within


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=1), dict(total_iters=0), dict(base_lr=0.0),
                                    dict(lam=-1.0), dict(bank_update_order="never"), dict(rho=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw).validate()

    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.total_iters, c.lam, c.margin, c.tau_nc) == (36, 2000, 0.05, 0.5, 0.05)
        assert c.nesterov and c.memory_enabled

    def test_config_dict_json_ready(self):
        assert config_dict(cfg(hidden_dims=(4, 4)))["hidden_dims"] == [4, 4]


class TestSampler:
    def test_epoch_covers_all_without_repeats(self):
        s = EpochSampler(12, 4, np.random.default_rng(0))
        seen = np.concatenate([s.next() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_batch_clipped_to_n(self):
        assert len(EpochSampler(3, 36, np.random.default_rng(0)).next()) == 3

    def test_too_small(self):
        with pytest.raises(ValueError):
            EpochSampler(1, 4, np.random.default_rng(0))


class TestFit:
    def test_lambda_zero_matches_source_only_with_dsbn(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(lam=0.0), DanceObjective(), sc.K)
        b = fit(src, tgt, cfg(lam=0.0), SourceOnlyObjective(), sc.K, use_target=True)
        assert params_equal(a.model, b.model)
        for la, lb in zip(a.log, b.log):
            assert la["cls"] == lb["cls"]

    def test_log_finite_and_breakdown(self, oda):
        sc, src, tgt = oda
        c = cfg()
        st = fit(src, tgt, c, DanceObjective(), sc.K)
        assert len(st.log) == c.total_iters and st.iteration == c.total_iters
        for row in st.log:
            assert all(math.isfinite(row[k]) for k in LOG_COLUMNS)
            assert row["total"] == pytest.approx(row["cls"] + c.lam * (row["nc"] + row["es"]), abs=1e-12)
            assert row["es"] <= 0.0

    def test_lr_schedule_logged(self, oda):
        sc, src, tgt = oda
        c = cfg(total_iters=10)
        st = fit(src, tgt, c, DanceObjective(), sc.K)
        for row in st.log:
            assert row["lr"] == pytest.approx(c.base_lr * (1 + 10 * row["iter"] / 10) ** -0.75, rel=1e-12)

    def test_cda_cls_decreases(self):
        sc, src, tgt = synth_office("CDA", 0, SMALL)
        st = fit(src, tgt, cfg(total_iters=200), DanceObjective(), sc.K)
        first = np.mean([r["cls"] for r in st.log[:20]])
        last = np.mean([r["cls"] for r in st.log[-20:]])
        assert last < 0.5 * first

    def test_debug_checks_pass(self, oda):
        sc, src, tgt = oda
        st = fit(src, tgt, cfg(total_iters=20, debug_checks=True), DanceObjective(), sc.K)
        assert st.bank.V.shape == (len(tgt), 8)

    def test_bank_rows_match_last_batch(self, oda):
        sc, src, tgt = oda
        seen = {}

        class Spy(DanceObjective):
            def step(self, model, f_s, f_t, cache_t, idx_t, grads, config):
                out = super().step(model, f_s, f_t, cache_t, idx_t, grads, config)
                seen["idx"], seen["f"] = idx_t.copy(), f_t.copy()
                return out

        st = fit(src, tgt, cfg(total_iters=5), Spy(), sc.K)
        assert np.array_equal(st.bank.V[seen["idx"]], seen["f"])

    def test_deterministic(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(total_iters=30), DanceObjective(), sc.K)
        b = fit(src, tgt, cfg(total_iters=30), DanceObjective(), sc.K)
        assert params_equal(a.model, b.model)
        assert np.array_equal(a.bank.V, b.bank.V)
        assert a.log == b.log

    def test_seed_matters(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(total_iters=5, seed=0), DanceObjective(), sc.K)
        b = fit(src, tgt, cfg(total_iters=5, seed=1), DanceObjective(), sc.K)
        assert not params_equal(a.model, b.model)

    def test_no_memory_mode(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(memory_enabled=False), DanceObjective(), sc.K)
        b = fit(src, tgt, cfg(), DanceObjective(), sc.K)
        assert a.bank is None
        assert all(math.isfinite(r["nc"]) for r in a.log)
        assert not params_equal(a.model, b.model)

    def test_bank_update_after(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(bank_update_order="after", total_iters=20), DanceObjective(), sc.K)
        b = fit(src, tgt, cfg(total_iters=20), DanceObjective(), sc.K)
        assert not params_equal(a.model, b.model)

    def test_detach_prototypes(self, oda):
        sc, src, tgt = oda
        a = fit(src, tgt, cfg(detach_prototypes_in_nc=True, total_iters=10), DanceObjective(), sc.K)
        assert all(math.isfinite(r["total"]) for r in a.log)

    def test_dance_separates_target_clusters(self, oda):
        sc, src, tgt = oda
        c = cfg(total_iters=400)
        before = init_model(c.model_config(src.X.shape[1], sc.K))
        st = fit(src, tgt, c, DanceObjective(), sc.K)
        r0 = separation_ratio(export_features(before, tgt.X, "target"), tgt.y)
        r1 = separation_ratio(export_features(st.model, tgt.X, "target"), tgt.y)
        assert r1 > r0

    @pytest.mark.parametrize("case", ["empty", "labels", "width", "no_target"])
    def test_errors(self, oda, case):
        sc, src, tgt = oda
        with pytest.raises(ValueError):
            if case == "empty":
                fit(src.subset(np.zeros(len(src), bool)), tgt, cfg(), DanceObjective(), sc.K)
            elif case == "labels":
                fit(src, tgt, cfg(), DanceObjective(), 2)
            elif case == "width":
                bad = type(tgt)(tgt.X[:, :3], tgt.y, "target")
                fit(src, bad, cfg(), DanceObjective(), sc.K)
            else:
                fit(src, None, cfg(), DanceObjective(), sc.K)


def test_export_features_chunked(oda):
    sc, src, tgt = oda
    m = init_model(cfg().model_config(10, sc.K))
    np.testing.assert_array_equal(export_features(m, tgt.X, "target", chunk=7),
                                  export_features(m, tgt.X, "target"))


def test_log_round_trip(tmp_path, oda):
    sc, src, tgt = oda
    st = fit(src, tgt, cfg(total_iters=8), DanceObjective(), sc.K)
    back = read_log(write_log(st.log, tmp_path / "log.csv"))
    assert back == st.log
