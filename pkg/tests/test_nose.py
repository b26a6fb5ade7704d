import dataclasses
import itertools

import numpy as np
import pytest

from entroprune.nose import (SelectionState, first_n_select, mask_layers, masking_study,
                             nose_select, random_select, ratio_to_count, remained_performance,
                             spearman, study_to_csv, target_entropy, transfer_entropy)
from entroprune.dilution import evaluate
from entroprune.entropy import dump_activations, load_activations
from entroprune.pipeline import BENCH_MODEL
from entroprune.vit import BlockMode, Mode, ViTModel

from conftest import TOY
from test_entropy import dump_entropy


def _perturbed(config, dtype=np.float64, seed=0):
    """Random model with larger weights so blocks differ measurably."""
    m = ViTModel(config, dtype)
    rng = np.random.default_rng(seed)
    for name, t in m.params.items():
        if t.data.ndim == 2:
            t.data += rng.standard_normal(t.data.shape) * 0.3
    return m


def oracle_te(model, masked, images, tap):
    """Independent TE: one full-batch forward, two-pass std, direct log-sum."""
    def h(mask):
        _, caps = model.forward(images, taps=[tap], masked=mask)
        f = caps[tap].data.reshape(-1, caps[tap].shape[-1])
        return np.sum(np.log(np.maximum(f.std(axis=0), 1e-12)))
    return abs(h(()) - h(masked))


def oracle_greedy(model, n, images, tap):
    chosen, steps = [], []
    for _ in range(n):
        scores = {i: oracle_te(model, chosen + [i], images, tap)
                  for i in range(model.config.depth) if i not in chosen}
        best = min(scores.values())
        pick = min(i for i, v in scores.items() if v == best)
        chosen.append(pick)
        steps.append(scores)
    return chosen, steps


class TestTransferEntropy:
    def test_empty_set_is_zero(self, toy64, images8):
        assert transfer_entropy(toy64, [], images8).te_value == 0.0

    def test_matches_oracle(self, images8):
        m = _perturbed(TOY)
        for s in ([0], [2, 4], [1, 3, 5]):
            te = transfer_entropy(m, s, images8, batch_size=9).te_value
            assert te == pytest.approx(oracle_te(m, s, images8, "mlp.5"), rel=1e-9, abs=1e-9)

    def test_order_invariant(self, images8):
        m = _perturbed(TOY)
        assert transfer_entropy(m, [3, 1], images8).te_value == \
            transfer_entropy(m, [1, 3], images8).te_value

    def test_logits_target(self, images8):
        m = _perturbed(TOY)
        te = transfer_entropy(m, [2], images8, target="logits").te_value
        assert te == pytest.approx(oracle_te(m, [2], images8, "logits"), rel=1e-9)

    def test_masking_requires_full_blocks(self, toy64):
        toy64.modes[1] = BlockMode(Mode.DILUTED, 0.5)
        with pytest.raises(ValueError):
            mask_layers(toy64, [1])
        with pytest.raises(IndexError):
            mask_layers(toy64, [9])

    def test_target_entropy_deterministic(self, toy64, images8):
        assert target_entropy(toy64, images8) == target_entropy(toy64, images8)


class TestNoseSelect:
    def test_matches_exhaustive_oracle_depth4(self, images8):
        cfg = dataclasses.replace(TOY, depth=4)
        m = _perturbed(cfg, seed=3)
        state = nose_select(m, 4, images8, batch_size=20)
        chosen, steps = oracle_greedy(m, 4, images8, "mlp.3")
        assert state.selected == chosen
        for row, ref in zip(state.trace, steps):
            assert sorted(row) == sorted(ref)
            for i in row:
                assert row[i] == pytest.approx(ref[i], rel=1e-9, abs=1e-9)

    def test_step_local_optimality(self, images8):
        m = _perturbed(TOY, seed=5)
        state = nose_select(m, 3, images8)
        for k, row in enumerate(state.trace):
            pick = state.selected[k]
            assert all(row[pick] <= v for v in row.values())
            assert pick not in state.selected[:k]

    def test_ties_go_to_lowest_index(self, images8):
        m = ViTModel(TOY, np.float64)
        for i in range(TOY.depth):  # zero every attention output: all TEs equal 0
            m.params[f"blocks.{i}.attn.proj.weight"].data[:] = 0
        state = nose_select(m, 3, images8)
        assert state.selected == [0, 1, 2]

    def test_candidates_restrict_pool(self, images8):
        m = _perturbed(TOY)
        state = nose_select(m, 2, images8, candidates=[1, 4, 5])
        assert set(state.selected) <= {1, 4, 5}
        assert len(state.trace[0]) == 3

    def test_n_out_of_range(self, toy64, images8):
        with pytest.raises(ValueError):
            nose_select(toy64, 7, images8)

    def test_state_serialization(self, images8, tmp_path):
        m = _perturbed(TOY)
        state = nose_select(m, 2, images8)
        back = SelectionState.from_json(state.to_json())
        assert back == state
        assert state.to_csv().splitlines()[0] == "step,layer,te,chosen"
        mat = state.trace_matrix(TOY.depth)
        assert np.isnan(mat[1, state.selected[0]])
        norm = state.normalized_trace(TOY.depth)
        assert np.nanmin(norm) == 0.0 and np.nanmax(norm) <= 1.0


class TestBaselines:
    def test_random_deterministic_and_valid(self):
        a = random_select(12, 5, seed=3)
        assert a == random_select(12, 5, seed=3)
        assert len(set(a)) == 5 and all(0 <= i < 12 for i in a)

    def test_first_n(self):
        assert first_n_select(3, 6) == [0, 1, 2]
        with pytest.raises(ValueError):
            first_n_select(7, 6)

    def test_ratio(self):
        assert ratio_to_count(0.4, 6) == 2
        assert ratio_to_count(0.4, 12) == 5
        assert ratio_to_count(0.5, 12) == 6
        with pytest.raises(ValueError):
            ratio_to_count(0.0, 6)

    def test_all_subsets_reachable(self):
        seen = {tuple(random_select(4, 2, s)) for s in range(200)}
        assert seen == set(itertools.combinations(range(4), 2))


class TestStudy:
    def test_masking_study_shapes(self, images8):
        m = _perturbed(TOY)
        labels = np.arange(len(images8)) % TOY.num_classes
        rows = masking_study(m, [1, 2], 3, 0, images8, labels, images8)
        assert [r.count for r in rows] == [1, 2]
        assert all(len(r.sets) == 3 and all(len(s) == r.count for s in r.sets) for r in rows)
        assert rows[0].acc_mean == pytest.approx(np.mean(rows[0].accs))
        assert study_to_csv(rows).count("\n") == 3

    def test_remained_performance_no_mask(self, toy64, images8):
        labels = np.argmax(toy64.logits(images8), axis=1)
        assert remained_performance(toy64, [], images8, labels) == 1.0

    def test_repeats_minimum(self, toy64, images8):
        with pytest.raises(ValueError):
            masking_study(toy64, [1], 1, 0, images8, np.zeros(64, int), images8)

    def test_spearman(self):
        assert spearman([1, 2, 3, 4], [8, 6, 4, 2]) == -1.0
        assert np.isnan(spearman([1, 1, 1], [1, 2, 3]))


class TestExamples:
    def test_empty_mask_bit_identical(self, images8):
        m = _perturbed(TOY)
        np.testing.assert_array_equal(mask_layers(m, []).predict(images8), m.logits(images8))

    def test_mask_everything_runs(self, images8):
        m = _perturbed(TOY)
        out = mask_layers(m, range(TOY.depth)).predict(images8)
        assert out.shape == (64, TOY.num_classes) and np.all(np.isfinite(out))

    def test_masked_tap_equals_input(self, images8):
        m = _perturbed(TOY)
        _, caps = mask_layers(m, [3]).forward(images8[:4], taps=["mlp.2", "attn.3"])
        np.testing.assert_array_equal(caps["attn.3"].data, caps["mlp.2"].data)

    def test_dead_value_path_has_no_te(self, images8):
        m = _perturbed(TOY)
        d = TOY.embed_dim
        m.params["blocks.2.attn.qkv.weight"].data[:, 2 * d:] = 0
        m.params["blocks.2.attn.qkv.bias"].data[2 * d:] = 0
        m.params["blocks.2.attn.proj.bias"].data[:] = 0
        assert transfer_entropy(m, [2], images8).te_value < 1e-6
        assert oracle_te(m, [2], images8, "mlp.5") < 1e-6

    def test_singletons_match_dump(self, images8, tmp_path):
        m = _perturbed(TOY)
        tap = "mlp.5"
        base = dump_entropy(dump_activations(m, images8, [tap], tmp_path / "base.eact")[tap])
        for i in range(TOY.depth):
            dump_activations(m, images8, [tap], tmp_path / f"m{i}.eact", masked=[i])
            _, arrays = load_activations(tmp_path / f"m{i}.eact")
            expect = abs(base - dump_entropy(arrays[tap]))
            assert abs(transfer_entropy(m, [i], images8, batch_size=10).te_value - expect) < 1e-8

    def test_full_depth_is_permutation(self, images8):
        m = _perturbed(TOY)
        assert sorted(nose_select(m, TOY.depth, images8).selected) == list(range(TOY.depth))

    def test_random_frequencies_binomial(self):
        depth, n, draws = 6, 2, 10_000
        counts = np.zeros(depth)
        for s in range(draws):
            counts[random_select(depth, n, s)] += 1
        p = n / depth
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)

    def test_no_mask_equals_eval(self, trained6, bench_data):
        test = bench_data[1]
        rp = remained_performance(trained6, [], test.images, test.labels)
        assert rp == evaluate(trained6, test)["top1"]

    def test_untrained_at_chance(self, bench_data):
        test = bench_data[1]
        m = ViTModel(BENCH_MODEL)
        p = 1 / BENCH_MODEL.num_classes
        sigma = np.sqrt(p * (1 - p) / len(test.labels))
        for s in ([], [1], [0, 3, 5]):
            assert abs(remained_performance(m, s, test.images, test.labels) - p) <= 3 * sigma

    def test_count_zero_row(self, images8):
        m = _perturbed(TOY)
        labels = np.arange(64) % TOY.num_classes
        row = masking_study(m, [0], 3, 0, images8, labels, images8)[0]
        assert row.acc_var == 0.0 and row.te_mean == 0.0 and row.te_var == 0.0

    def test_study_deterministic(self, images8):
        m = _perturbed(TOY)
        labels = np.arange(64) % TOY.num_classes
        a = masking_study(m, [1, 3], 3, 11, images8, labels, images8)
        b = masking_study(m, [1, 3], 3, 11, images8, labels, images8)
        assert a == b
