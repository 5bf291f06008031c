import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otsim.datagen import SyntheticConfig, gen_synthetic_pair
from otsim.metric import ClassStats, MetricConfig, class_stats, pairwise_ot_similarity
from otsim.privacy import (CommodityServer, MaskReuseError, PrivacyBudget, PrivacyGateError,
                           add_dp_noise_stats, check_privacy_budget, cov_noise_scale, mean_noise_scale,
                           private_pairwise_similarity, simulate_attack, svd_reconstruction_attack,
                           secure_dot_product, symmetric_noise, zcdp_to_dp)
from otsim.probe import ModelSpec, TrainOpts, run_probe_round


def spiked(n, d, seed, spikes=(10.0, 8.0, 6.0)):
    """Rows with a clear top-k eigenspace (k = len(spikes))."""
    r = np.random.default_rng(seed)
    scales = np.ones(d)
    scales[: len(spikes)] = np.sqrt(spikes)
    Q, _ = np.linalg.qr(np.random.default_rng(1000 + seed).standard_normal((d, d)))
    return (r.standard_normal((n, d)) * scales) @ Q.T


class TestSecureDotProduct:
    def test_small_example(self, rng):
        X, Y = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        P, _ = secure_dot_product(X, Y)
        assert np.linalg.norm(P - X @ Y.T) <= 1e-9 * np.linalg.norm(X @ Y.T)

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**16))
    @settings(max_examples=100, deadline=None)
    def test_exact_on_fuzzed_shapes(self, n, m, d, seed):
        r = np.random.default_rng(seed)
        X, Y = r.standard_normal((n, d)), r.standard_normal((m, d))
        P, _ = secure_dot_product(X, Y)
        ref = X @ Y.T
        assert np.linalg.norm(P - ref) <= 1e-9 * max(np.linalg.norm(ref), 1e-300) or np.allclose(P, ref, atol=1e-12)

    def test_zero_input_still_masked(self):
        P, tr = secure_dot_product(np.zeros((3, 2)), np.ones((4, 2)))
        assert np.allclose(P, 0, atol=1e-12)
        sent = [p for msg, p in zip(tr.messages, tr.payloads) if msg.sender == "A" and msg.receiver == "B"]
        assert len(sent) == 1 and np.abs(sent[0]).max() > 0

    def test_fresh_mask_ids(self, rng):
        X, Y = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        _, t1 = secure_dot_product(X, Y)
        _, t2 = secure_dot_product(X, Y)
        assert not set(t1.mask_ids) & set(t2.mask_ids)
        assert t1.invocation != t2.invocation

    def test_masked_messages_are_input_plus_logged_mask(self, rng):
        X, Y = rng.standard_normal((5, 3)), rng.standard_normal((2, 3))
        dealer = CommodityServer(np.random.default_rng(0))
        _, tr = secure_dot_product(X, Y, dealer)
        inputs = {("A", "B"): X, ("B", "A"): Y.T}
        checked = 0
        for msg, payload in zip(tr.messages, tr.payloads):
            key = (msg.sender, msg.receiver)
            if msg.mask_id and key in inputs and payload.shape == inputs[key].shape:
                mask = dealer.mask_log[msg.mask_id]
                assert np.array_equal(payload, inputs[key] + mask)
                assert np.allclose(payload - mask, inputs[key], atol=1e-12)
                # the receiver never holds the mask that hides the sender's input
                assert not any(m.receiver == msg.receiver and m.mask_id == msg.mask_id and m.sender == "coordinator"
                               for m in tr.messages)
                checked += 1
        assert checked == 2

    def test_mask_reuse_aborts(self, rng):
        class ReplayDealer(CommodityServer):
            def __init__(self, ids):
                super().__init__(np.random.default_rng(0))
                self.ids = iter(ids)

            def _mask(self, shape):
                _, M = super()._mask(shape)
                return next(self.ids), M

        X, Y = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        honest = CommodityServer()
        _, tr = secure_dot_product(X, Y, honest)
        with pytest.raises(MaskReuseError):
            secure_dot_product(X, Y, ReplayDealer(list(honest.mask_log)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner"):
            secure_dot_product(np.ones((2, 3)), np.ones((2, 4)))

    def test_transcript_json_has_digests_only(self, rng, tmp_path):
        _, tr = secure_dot_product(rng.standard_normal((2, 2)), rng.standard_normal((3, 2)))
        doc = json.loads(tr.to_json(tmp_path / "t.json"))
        assert len(doc["messages"]) == len(tr.messages)
        assert all(set(m) == {"sender", "receiver", "digest", "shape", "mask_id"} for m in doc["messages"])
        assert "payloads" not in doc


class TestBudget:
    def test_split_and_epsilon(self):
        b = PrivacyBudget(0.5)
        assert b.rho_mean == b.rho_cov == 0.25
        assert b.epsilon == pytest.approx(5.298, abs=1e-3)

    @pytest.mark.parametrize("kw", [dict(rho=0), dict(rho=1, delta=1), dict(rho=1, rho_mean=1.0),
                                    dict(rho=1, rho_mean=0.3, rho_cov=0.3)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PrivacyBudget(**kw)

    def test_gate_reference(self):
        chk = check_privacy_budget(0.4, 64, 100)
        assert chk.threshold == pytest.approx(0.48) and chk.passed and chk.margin == pytest.approx(0.08)

    def test_gate_boundary_is_strict(self):
        thr = 6 * math.sqrt(16) / 200
        assert not check_privacy_budget(thr, 16, 200).passed

    def test_gate_large_n(self):
        assert not check_privacy_budget(1e-3, 64, 10**9).passed

    @given(st.integers(1, 512), st.integers(1, 10**6), st.floats(0.0, 2.0))
    @settings(max_examples=200, deadline=None)
    def test_gate_predicate(self, d, n, frac):
        thr = 6 * math.sqrt(d) / n
        rho = frac * thr
        assert check_privacy_budget(rho, d, n).passed == (rho < thr)

    def test_gate_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            check_privacy_budget(0.1, 0, 10)

    def test_conversion(self):
        assert zcdp_to_dp(0.5, 1e-5) == pytest.approx(5.298, abs=1e-3)
        assert zcdp_to_dp(0.3, 1 - 1e-15) == pytest.approx(0.3, abs=1e-6)
        eps = [zcdp_to_dp(r, 1e-6) for r in np.logspace(-4, 2, 30)]
        assert all(x < y for x, y in zip(eps, eps[1:]))
        with pytest.raises(ValueError):
            zcdp_to_dp(-1, 0.1)
        with pytest.raises(ValueError):
            zcdp_to_dp(1, 0)


class TestNoise:
    stats = ClassStats(0, np.zeros(4), np.eye(4) + 1e-4 * np.eye(4), 200)

    def test_infinite_budget_is_identity(self):
        s = class_stats(np.random.default_rng(0).standard_normal((50, 4)))
        out = add_dp_noise_stats(s, PrivacyBudget(1e14), seed=1)
        assert out.noised and np.allclose(out.mean, s.mean, atol=1e-6) and np.allclose(out.cov, s.cov, atol=1e-6)

    def test_deterministic(self):
        b = PrivacyBudget(0.1)
        o1, o2 = add_dp_noise_stats(self.stats, b, 7), add_dp_noise_stats(self.stats, b, 7)
        assert np.array_equal(o1.mean, o2.mean) and np.array_equal(o1.cov, o2.cov)

    def test_mean_noise_calibration(self):
        b = PrivacyBudget(0.5)
        draws = np.array([add_dp_noise_stats(self.stats, b, s).mean for s in range(10_000)])
        assert draws.std() == pytest.approx(mean_noise_scale(200, 0.25), rel=0.03)

    def test_cov_noise_calibration(self):
        b = PrivacyBudget(0.5)
        draws = np.array([add_dp_noise_stats(self.stats, b, s).cov - self.stats.cov for s in range(10_000)])
        iu = np.triu_indices(4)
        assert draws[:, iu[0], iu[1]].std() == pytest.approx(cov_noise_scale(200, 0.25), rel=0.03)
        assert np.allclose(draws, draws.transpose(0, 2, 1))

    def test_output_positive_definite(self):
        s = class_stats(np.random.default_rng(0).standard_normal((60, 6)) * 1e-3)
        out = add_dp_noise_stats(s, PrivacyBudget(1e-3), 0)
        assert np.linalg.eigvalsh(out.cov).min() >= 1e-4 - 1e-12

    def test_symmetric_noise(self, rng):
        E = symmetric_noise(5, 0.3, rng)
        assert np.array_equal(E, E.T)

    def test_empty_class(self):
        with pytest.raises(ValueError):
            add_dp_noise_stats(ClassStats(0, np.zeros(2), np.eye(2), 0), PrivacyBudget(1.0), 0)


class TestAttack:
    def test_zero_noise(self):
        H = spiked(200, 32, 0)
        res = svd_reconstruction_attack(H.T @ H, H, 3)
        assert res.alignment == pytest.approx(1.0, abs=1e-6) and res.k == 3

    def test_range(self, rng):
        for _ in range(20):
            S = rng.standard_normal((6, 6))
            res = svd_reconstruction_attack(S + S.T, rng.standard_normal((10, 6)), 2)
            assert 0 <= res.alignment <= 1

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            svd_reconstruction_attack(np.eye(3), np.ones((4, 3)), 4)
        with pytest.raises(ValueError):
            svd_reconstruction_attack(np.eye(2), np.ones((4, 3)), 1)

    def test_more_noise_less_alignment(self):
        thr = 6 * math.sqrt(32) / 200
        lo = np.mean([simulate_attack(spiked(200, 32, s), thr / 10, 3, s).alignment for s in range(20)])
        hi = np.mean([simulate_attack(spiked(200, 32, s), thr * 100, 3, s).alignment for s in range(20)])
        assert lo < hi


class TestPrivatePipeline:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup():
        a, b = gen_synthetic_pair(SyntheticConfig(overlap=0.5, seed=2))
        model, _ = run_probe_round([a, b], ModelSpec(16, seed=2), TrainOpts(seed=2))
        return model, a, b

    def test_noiseless_limit_matches_plain(self, setup):
        model, a, b = setup
        plain = pairwise_ot_similarity(a, b, model)
        priv = private_pairwise_similarity(a, b, model, MetricConfig(), PrivacyBudget(1e14), allow_gate_failure=True)
        assert abs(priv.s_tilde - plain.s_tilde) <= 0.01
        assert priv.privacy_mode and priv.budget["gate_overridden"]
        for c, F in plain.feature_costs.items():
            assert np.max(np.abs(priv.feature_costs[c] - F)) <= 1e-9
        assert len(priv.transcripts) == len(plain.per_class)

    def test_gate_refusal(self, setup):
        model, a, b = setup
        with pytest.raises(PrivacyGateError, match="threshold"):
            pairwise_ot_similarity(a, b, model, privacy=PrivacyBudget(10.0))

    def test_passing_budget_recorded(self, setup):
        model, a, b = setup
        rho = 0.5 * 6 * math.sqrt(8) / 200
        rep = pairwise_ot_similarity(a, b, model, privacy=PrivacyBudget(rho, seed=3))
        assert rep.budget["rho"] == rho and all(g["passed"] for g in rep.budget["gate"])
        assert not rep.budget["gate_overridden"] and 0 <= rep.s_tilde <= 1
        assert json.loads(rep.to_json())["privacy_mode"] is True

    @pytest.mark.xfail(strict=True, reason="observed gap 0.100-0.111 at d=16, n_c=200; see the design notes")
    def test_utility_at_half_threshold(self):
        gaps = []
        for seed in range(10):
            a, b = gen_synthetic_pair(SyntheticConfig(overlap=1.0, seed=seed))
            model, _ = run_probe_round([a, b], ModelSpec(16, hidden=(32, 16), seed=seed), TrainOpts(seed=seed))
            rho = 0.5 * 6 * math.sqrt(16) / 200
            plain = pairwise_ot_similarity(a, b, model).s_tilde
            priv = pairwise_ot_similarity(a, b, model, privacy=PrivacyBudget(rho, seed=seed)).s_tilde
            gaps.append(abs(priv - plain))
        assert max(gaps) <= 0.1, gaps
