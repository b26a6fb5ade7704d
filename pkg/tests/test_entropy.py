import numpy as np
import pytest

from entroprune.entropy import (ChannelStats, EntropyReport, ProbeError, accumulate_taps,
                                channel_std, dump_activations, entropy_profile, layer_entropy,
                                load_activations)


class TestLayerEntropy:
    def test_known_sigma(self):
        sigma = np.array([0.5, 1.0, 2.0, 4.0])
        x = np.random.default_rng(0).standard_normal((100_000, 4)) * sigma
        h = layer_entropy(channel_std(x))
        assert abs(h - np.log(sigma).sum()) <= 0.02 * abs(np.log(sigma).sum()) + 0.02

    def test_scale_law(self):
        x = np.random.default_rng(1).standard_normal((500, 12))
        c = 3.7
        diff = layer_entropy(channel_std(c * x)) - layer_entropy(channel_std(x))
        assert abs(diff - 12 * np.log(c)) < 1e-8

    def test_dead_channel_floor(self):
        x = np.random.default_rng(2).standard_normal((50, 3))
        x[:, 1] = 4.0
        h = layer_entropy(channel_std(x))
        assert np.isfinite(h)
        assert h < np.log(1e-12) + 5

    def test_population_std(self):
        x = np.array([[1.0], [3.0]])
        np.testing.assert_allclose(channel_std(x), [1.0])

    def test_too_few_samples(self):
        with pytest.raises(ProbeError):
            channel_std(np.ones((1, 4)))

    def test_negative_sigma_rejected(self):
        with pytest.raises(ProbeError):
            layer_entropy([1.0, -0.1])

    def test_token_axis_pooled(self):
        x = np.random.default_rng(3).standard_normal((4, 9, 5))
        np.testing.assert_allclose(channel_std(x), x.reshape(-1, 5).std(axis=0))


class TestStreaming:
    def test_update_equals_two_pass(self):
        x = np.random.default_rng(4).standard_normal((1000, 7)) * 3 + 100
        st = ChannelStats("t", 7)
        for chunk in np.array_split(x, [1, 50, 51, 400, 999]):
            st.update(chunk)
        assert st.sample_count == 1000
        assert abs(st.entropy() - layer_entropy(channel_std(x))) < 1e-9

    def test_merge_equals_two_pass(self):
        x = np.random.default_rng(5).standard_normal((300, 4))
        a, b = ChannelStats("a", 4), ChannelStats("b", 4)
        a.update(x[:120])
        b.update(x[120:])
        a.merge(b)
        np.testing.assert_allclose(a.std, channel_std(x), rtol=1e-12)

    def test_merge_into_empty(self):
        a, b = ChannelStats("a", 2), ChannelStats("b", 2)
        b.update(np.arange(10.0).reshape(5, 2))
        a.merge(b)
        np.testing.assert_allclose(a.std, b.std)

    def test_single_sample_rejected(self):
        st = ChannelStats("t", 3)
        st.update(np.ones((1, 3)))
        with pytest.raises(ProbeError):
            st.entropy()


class TestProfile:
    def test_batch_size_invariant(self, toy64, images8):
        a = entropy_profile(toy64, images8, batch_size=64)
        b = entropy_profile(toy64, images8, batch_size=5)
        np.testing.assert_allclose(a.values("mlp"), b.values("mlp"), rtol=0, atol=1e-9)
        np.testing.assert_allclose(a.values("attention"), b.values("attention"), atol=1e-9)

    def test_matches_direct_computation(self, toy64, images8):
        _, caps = toy64.forward(images8, taps=["mlp.3"])
        direct = layer_entropy(channel_std(caps["mlp.3"].data))
        rep = entropy_profile(toy64, images8, batch_size=16)
        assert abs(rep.values("mlp")[3] - direct) < 1e-9

    def test_report_round_trips(self, toy64, images8):
        rep = entropy_profile(toy64, images8[:20], dataset_id="probe-x", seed=4)
        back = EntropyReport.from_json(rep.to_json())
        assert back == rep
        csv_back = EntropyReport.from_csv(rep.to_csv(), rep.probe)
        assert csv_back == rep
        assert len(rep.entries) == 2 * toy64.config.depth

    def test_empty_probe(self, toy64):
        with pytest.raises(ProbeError):
            accumulate_taps(toy64, np.zeros((0, 8, 8, 3)), ["mlp.0"])


def dump_entropy(arr):
    """Independent oracle: population std over all samples and tokens, natural log."""
    sigma = arr.reshape(-1, arr.shape[-1]).astype(np.float64).std(axis=0)
    return float(np.log(np.maximum(sigma, 1e-12)).sum())


class TestExamples:
    def test_constant_features(self):
        np.testing.assert_array_equal(channel_std(np.full((10, 3), 2.5)), 0.0)

    def test_two_samples(self):
        np.testing.assert_array_equal(channel_std(np.array([[0.0, 0.0], [2.0, 2.0]])), [1.0, 1.0])

    def test_unit_and_e(self):
        assert layer_entropy(np.ones(7)) == 0.0
        assert abs(layer_entropy(np.full(7, np.e)) - 7) < 1e-12

    def test_zero_sigma_clamped(self):
        h = layer_entropy([0.0, 1.0])
        assert h == np.log(1e-12)

    def test_zero_weight_model_at_floor(self, toy64, images8):
        for t in toy64.params.values():
            t.data[...] = 0
        rep = entropy_profile(toy64, images8[:16])
        floor = toy64.config.embed_dim * np.log(1e-12)
        assert all(e.h_sigma == floor for e in rep.entries)

    def test_deterministic(self, toy64, images8):
        assert entropy_profile(toy64, images8, seed=1) == entropy_profile(toy64, images8, seed=1)

    def test_trained_profile_matches_dump(self, trained6, bench_data, tmp_path):
        probe = bench_data[0].images[:256]
        depth = trained6.config.depth
        taps = [t for i in range(depth) for t in (f"attn.{i}", f"mlp.{i}")]
        dump_activations(trained6, probe, taps, tmp_path / "acts.eact", batch_size=100)
        _, arrays = load_activations(tmp_path / "acts.eact")
        rep = entropy_profile(trained6, probe, batch_size=64)
        for kind, prefix in (("attention", "attn"), ("mlp", "mlp")):
            for i, v in enumerate(rep.values(kind)):
                assert abs(v - dump_entropy(arrays[f"{prefix}.{i}"])) < 1e-8
