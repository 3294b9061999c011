import numpy as np
import pytest

from ffnfusion import (
    FusionPlan,
    InvalidArgumentError,
    LatencyParams,
    analytic_latency,
    apply_fusion_plan,
    compare_models,
    model_forward,
    remove_ffns,
    stage_flops,
    wall_clock_bench,
)
from ffnfusion.bench import StagePool, _shard_bounds, output_divergence
from ffnfusion.model import zero_like_model
from ffnfusion.parallel import ParallelPlan, apply_block_parallel_plan
from helpers import make_model


def ffn_chain(count, d_h=3, d_e=4, seed=0):
    return make_model([(False, d_h)] * count, d_e=d_e, n_heads=1, head_dim=d_e, seed=seed)


class TestStageFlops:
    def test_identity_block(self):
        assert stage_flops(make_model([(False, 0)]), [0], 5) == 0

    def test_ffn_hand_value(self):
        assert stage_flops(ffn_chain(1), [0], 2) == 144

    def test_attention_hand_value(self):
        model = make_model([(True, 0)], d_e=4, n_heads=2, head_dim=2)
        # 8 n d_e W + 4 n^2 W with n=3, W=4
        assert stage_flops(model, [0], 3) == 8 * 3 * 4 * 4 + 4 * 9 * 4

    def test_additive_over_blocks(self):
        model = make_model([(True, 5), (False, 3), (True, 0)])
        parts = sum(stage_flops(model, [j], 4) for j in range(3))
        assert stage_flops(model, [0, 1, 2], 4) == parts

    def test_fusion_conserves_flops(self):
        model = ffn_chain(4, d_h=5)
        fused = apply_fusion_plan(model, FusionPlan([(0, 3)]))
        assert stage_flops(fused, [0], 7) == sum(stage_flops(model, [j], 7) for j in range(4))


class TestAnalyticLatency:
    def test_zero_flop_stage_costs_one_sync(self):
        model = make_model([(False, 0)])
        report = analytic_latency(model, LatencyParams(t_sync=1.0))
        assert report.total == 1.0
        assert report.stage_flops == [0]

    def test_hand_example(self):
        model = ffn_chain(2)
        F = stage_flops(model, [0], 1)
        p = LatencyParams(g=1, w_wave=F, t_tile=1.0, t_sync=0.5, n=1)
        fused = apply_fusion_plan(model, FusionPlan([(0, 1)]))
        assert analytic_latency(model, p).total == 3.0
        assert analytic_latency(fused, p).total == 2.5

    def test_no_sync_no_saving(self):
        model = ffn_chain(4)
        F = stage_flops(model, [0], 1)
        p = LatencyParams(g=2, w_wave=F / 2, t_tile=0.25, t_sync=0.0)
        fused = apply_fusion_plan(model, FusionPlan([(0, 3)]))
        assert analytic_latency(model, p).total == analytic_latency(fused, p).total

    def test_monotone_in_sync_cost(self):
        model = make_model([(True, 4), (False, 3), (True, 5)])
        totals = [analytic_latency(model, LatencyParams(t_sync=t)).total for t in (0.0, 1e-5, 1e-3, 1.0)]
        assert totals == sorted(totals) and len(set(totals)) == 4

    def test_wave_ceiling(self):
        model = ffn_chain(1)
        # 144 flops over waves of 100 is two waves
        p = LatencyParams(g=1, w_wave=100, t_tile=1.0, t_sync=0.0, n=2)
        assert analytic_latency(model, p).total == 2.0

    def test_exact_multiple_is_not_rounded_up(self):
        model = make_model([(False, 1)], d_e=1, n_heads=1, head_dim=1)
        p = LatencyParams(g=1, w_wave=2.0, t_tile=1.0, t_sync=0.0, n=1)
        assert analytic_latency(model, p).total == 3.0

    def test_report_fields(self):
        model = make_model([(True, 4), (False, 3)])
        r = analytic_latency(model, LatencyParams(n=4))
        assert r.stage_count == r.sync_count == 2
        assert r.tokens_per_second * r.total == pytest.approx(4.0, rel=1e-15)
        lines = r.to_csv().splitlines()
        assert lines[0].startswith("0,") and lines[-1].startswith("total=")

    def test_params_from_string(self):
        p = LatencyParams.from_string("g=4,t_sync=0.5,n=3")
        assert (p.g, p.t_sync, p.n, p.w_wave) == (4, 0.5, 3, 1e6)
        with pytest.raises(InvalidArgumentError):
            LatencyParams.from_string("bogus=1")
        with pytest.raises(InvalidArgumentError):
            LatencyParams.from_string("g=0")


class TestWallClock:
    def test_shard_bounds(self):
        assert _shard_bounds(7, 3) == [(0, 3), (3, 5), (5, 7)]
        assert _shard_bounds(2, 4) == [(0, 1), (1, 2)]

    @pytest.mark.parametrize("workers", [1, 2, 3, 4])
    def test_output_matches_forward(self, workers, rng):
        model = make_model([(True, 6), (False, 9), (False, 7), (True, 0), (False, 5)], seed=8)
        X = rng.standard_normal((5, 8))
        report = wall_clock_bench(model, X, workers)
        assert report.output.tobytes() == model_forward(model, X)[0].tobytes()
        assert report.stage_count == 5

    @pytest.mark.parametrize("workers", [1, 3])
    def test_grouped_stages(self, workers, rng):
        model = make_model([(True, 6), (True, 4), (False, 9), (False, 3)], seed=8)
        model = apply_block_parallel_plan(model, ParallelPlan([(0, 1), (2, 3)], 2))
        X = rng.standard_normal((4, 8))
        assert wall_clock_bench(model, X, workers).output.tobytes() == model_forward(model, X)[0].tobytes()

    def test_injected_sync_cost(self, rng):
        model = ffn_chain(3)
        report = wall_clock_bench(model, rng.standard_normal((2, 4)), 1, injected_sync_cost=0.002)
        assert all(s >= 0.002 for s in report.stage_seconds)

    def test_task_errors_propagate(self):
        def boom():
            raise RuntimeError("task failed")

        with StagePool(2) as pool:
            assert pool.run([lambda: 1, lambda: 2, lambda: 3]) == [1, 2, 3]
            with pytest.raises(RuntimeError, match="task failed"):
                pool.run([lambda: 0, boom])
            assert pool.run([]) == []


class TestCompare:
    def test_identical_models(self, rng):
        model = make_model([(True, 4), (False, 3)], seed=1)
        cmp = compare_models(model, model, rng.standard_normal((3, 8)), LatencyParams())
        assert cmp.divergence == 0.0
        assert cmp.analytic_a.total == cmp.analytic_b.total

    def test_fused_against_sequential(self, rng):
        model = ffn_chain(4, d_h=6, d_e=8)
        fused = apply_fusion_plan(model, FusionPlan([(0, 3)]))
        cmp = compare_models(model, fused, rng.standard_normal((3, 8)), LatencyParams(t_sync=1e-3))
        assert cmp.analytic_b.total < cmp.analytic_a.total
        assert cmp.analytic_a.sync_count - cmp.analytic_b.sync_count == 3
        assert 0.0 < cmp.divergence < 2.0

    def test_zero_weight_fusion(self, rng):
        model = zero_like_model(ffn_chain(3, d_e=8))
        fused = apply_fusion_plan(model, FusionPlan([(0, 2)]))
        cmp = compare_models(model, fused, rng.standard_normal((3, 8)), LatencyParams())
        assert cmp.divergence == 0.0
        assert cmp.analytic_b.stage_count < cmp.analytic_a.stage_count

    def test_removal(self, rng):
        model = make_model([(True, 6), (False, 5), (True, 4)], seed=3)
        cmp = compare_models(model, remove_ffns(model, [1]), rng.standard_normal((3, 8)), LatencyParams())
        assert cmp.divergence > 0.0
        assert cmp.analytic_b.total < cmp.analytic_a.total

    def test_divergence_definition(self):
        a = np.array([[3.0, 4.0], [1.0, 0.0]])
        b = np.array([[3.0, 4.0], [1.0, 0.5]])
        assert output_divergence(a, b) == 0.5

    def test_width_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            compare_models(ffn_chain(1, d_e=4), ffn_chain(1, d_e=8), rng.standard_normal((2, 4)), LatencyParams())
