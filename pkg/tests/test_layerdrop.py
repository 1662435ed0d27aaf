"""LayerDrop schedules: stochastic masks, Every Other pruning, FLOP ratios."""

import numpy as np
import pytest

from adaptive_vl.flops import attention_flops, count_flops
from adaptive_vl.layerdrop import (OFF, PRUNED, TRAINING, ConfigError, DropSchedule,
                                   counter_uniform, every_other_drops, expected_flops_ratio,
                                   format_kept, mask_to_indices, prune_every_other, training_mask)
from adaptive_vl.model import EncoderConfig


class TestCounterUniform:
    def test_pure_function_of_key(self):
        assert counter_uniform(1, 2, "lang", 0) == counter_uniform(1, 2, "lang", 0)
        assert counter_uniform(1, 2, "lang", 0) != counter_uniform(1, 2, "lang", 1)

    def test_uniform_moments(self):
        u = np.array([counter_uniform(7, i) for i in range(20000)])
        assert 0.0 <= u.min() and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.01
        assert abs(u.var() - 1 / 12) < 0.005


class TestSchedule:
    def test_drop_count_must_be_below_depth(self):
        with pytest.raises(ConfigError):
            DropSchedule({"lang": 3}, {"lang": 3}, TRAINING)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            DropSchedule({"lang": 3}, {}, "sometimes")

    def test_mode_guards(self):
        sched = DropSchedule({"lang": 3}, {"lang": 1}, OFF)
        with pytest.raises(ConfigError):
            training_mask(sched, 0)
        with pytest.raises(ConfigError):
            prune_every_other(sched)


class TestTrainingMask:
    def test_no_drops_keeps_everything(self):
        sched = DropSchedule({"lang": 4, "vis": 2}, {}, TRAINING, seed=3)
        for step in range(200):
            assert all(all(v) for v in training_mask(sched, step).values())

    def test_reproducible(self):
        sched = DropSchedule({"lang": 5}, {"lang": 2}, TRAINING, seed=11)
        again = DropSchedule({"lang": 5}, {"lang": 2}, TRAINING, seed=11)
        assert [training_mask(sched, s) for s in range(50)] == \
               [training_mask(again, s) for s in range(50)]

    def test_keep_rate_five_layers_one_drop(self):
        sched = DropSchedule({"s": 5}, {"s": 1}, TRAINING, seed=0)
        draws = 100_000 // 5
        kept = sum(sum(training_mask(sched, step)["s"]) for step in range(draws))
        assert kept / (5 * draws) == pytest.approx(0.8, abs=0.005)

    def test_keep_one_of_n_on_average(self):
        n = 4
        sched = DropSchedule({"s": n}, {"s": n - 1}, TRAINING, seed=1)
        steps = 100_000
        mean = sum(sum(training_mask(sched, step)["s"]) for step in range(steps)) / steps
        assert mean == pytest.approx(1.0, rel=0.01)


class TestEveryOther:
    def test_five_drop_one(self):
        sched = DropSchedule({"lang": 5}, {"lang": 1}, PRUNED)
        assert every_other_drops(5, 1) == [4]
        assert prune_every_other(sched) == {"lang": [0, 1, 2, 3]}

    def test_nine_drop_three(self):
        assert every_other_drops(9, 3) == [2, 5, 8]
        kept = prune_every_other(DropSchedule({"s": 9}, {"s": 3}, PRUNED))["s"]
        assert kept == [0, 1, 3, 4, 6, 7]

    def test_no_drops_is_identity(self):
        assert prune_every_other(DropSchedule({"s": 6}, {}, PRUNED)) == {"s": list(range(6))}

    def test_drop_count_at_depth_rejected(self):
        with pytest.raises(ConfigError):
            every_other_drops(4, 4)

    @pytest.mark.parametrize("n", range(1, 13))
    def test_exactly_n_minus_p_remain(self, n):
        for p in range(n):
            assert len(set(every_other_drops(n, p))) == p
            assert all(0 <= i < n for i in every_other_drops(n, p))


class TestFormatting:
    def test_format_kept(self):
        layers = {"lang": 3, "vis": 1, "cross": 1}
        assert format_kept({"lang": [0, 2], "vis": [0], "cross": []}, layers) == \
            "lang:0,2;vis:0;cross:"
        assert format_kept(None, layers) == "lang:0,1,2;vis:0;cross:0"

    def test_mask_to_indices(self):
        assert mask_to_indices({"a": [True, False, True]}) == {"a": [0, 2]}


class TestFlopsRatio:
    def test_no_drops(self):
        assert expected_flops_ratio(EncoderConfig(L=3, V=2, X=2)) == 1.0

    def test_homogeneous_stream_linear_accounting(self):
        cfg = EncoderConfig(L=10, p_lang=1, arch="language")
        full = attention_flops(count_flops(cfg))
        pruned = attention_flops(count_flops(cfg, pruned=True))
        assert pruned / full == pytest.approx(0.9, rel=1e-15)
        assert 0.9 < expected_flops_ratio(cfg) < 1.0
