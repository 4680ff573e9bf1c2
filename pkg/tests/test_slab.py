from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from service.constitutive import ModelParams, TangentKind, TangentVariant
from service.exceptions import SlabSolveError
from service.femspace import MixedSpace
from service.forms import DiscretizationConfig, SpatialOperator
from service.manufactured import ManufacturedCase, interpolate_state
from service.mesh import boundary_tag_assign, right_edge_neumann, uniform_mesh
from service.slab import (
    SlabContext,
    SlabLinearization,
    assemble_slab_matrix,
    initial_guess,
    left_endpoint_value,
    left_trace,
    march,
    normalize_pressure,
    slab_jacobian_apply,
    slab_residual,
)
from service.timebasis import TimePartition, gauss_radau

PARAMS = ModelParams(p=1.5, delta=0.1, nu=1.0, nu_inf=0.01)
EXN = TangentVariant(TangentKind.EXN)


def make_operator(mesh=None):
    case = ManufacturedCase(PARAMS)
    space = MixedSpace(mesh or uniform_mesh(2, 2))
    return SpatialOperator(space, case.problem_data(), PARAMS, DiscretizationConfig()), case


def make_context(k=1, interval=(0.25, 0.5), mesh=None):
    operator, case = make_operator(mesh)
    v_prev = interpolate_state(case, operator.space, interval[0])[: operator.space.M_v]
    return SlabContext(operator=operator, basis=gauss_radau(k), interval=interval, v_prev=v_prev), case


def manufactured_slab(ctx, case, noise=0.0, seed=0):
    blocks = [interpolate_state(case, ctx.operator.space, float(t)) for t in ctx.node_times]
    U = np.concatenate(blocks)
    if noise:
        U = U + noise * np.random.default_rng(seed).normal(size=U.size)
    return U


class TestSlabContext:
    """SlabContext のテスト"""

    def test_layout(self):
        """k = 1 では 2 節点、節点時刻は t_{n-1} + τ t̂_μ"""
        ctx, _ = make_context()
        assert ctx.layout.num_nodes == 2
        assert ctx.layout.size == 2 * ctx.operator.space.size
        assert ctx.node_times == pytest.approx([0.25 + 0.25 / 3.0, 0.5])
        assert ctx.node_weights == pytest.approx([0.1875, 0.0625])

    def test_invalid_interval(self):
        """長さ 0 の区間は ValueError"""
        operator, _ = make_operator()
        with pytest.raises(ValueError, match="時間区間"):
            SlabContext(operator=operator, basis=gauss_radau(1), interval=(0.5, 0.5),
                        v_prev=np.zeros(operator.space.M_v))


class TestSlabResidual:
    """slab_residual関数のテスト"""

    @patch("service.slab.spatial_residual")
    def test_constant_extension_has_no_time_term(self, mock_residual):
        """空間残差が 0 なら流入値の定数延長でスラブ残差は 0"""
        ctx, _ = make_context(k=2)
        mock_residual.return_value = np.zeros(ctx.operator.space.size)
        U = initial_guess(ctx)
        assert np.abs(slab_residual(ctx, U)).max() == pytest.approx(0.0, abs=1e-13)

    @patch("service.slab.spatial_residual")
    def test_linear_in_time_matches_derivative(self, mock_residual):
        """V(t) = c(t - t_{n-1}) のとき時間項は τ Σ w_μ M c に等しい"""
        ctx, _ = make_context(k=1)
        space = ctx.operator.space
        mock_residual.return_value = np.zeros(space.size)
        c = np.random.default_rng(1).normal(size=space.M_v)
        ctx.v_prev = np.zeros(space.M_v)
        velocity = np.outer(ctx.node_times - ctx.interval[0], c)
        U = ctx.layout.assemble(velocity, np.zeros((2, space.M_p)))
        residual = ctx.layout.velocity(slab_residual(ctx, U))
        expected = -np.outer(ctx.node_weights, space.velocity_mass @ c)
        assert residual == pytest.approx(expected, abs=1e-12)


class TestSlabJacobian:
    """スラブ Jacobian のテスト"""

    def test_apply_matches_assemble(self):
        """作用と組み立て行列が一致する"""
        ctx, case = make_context()
        U = manufactured_slab(ctx, case, noise=0.05)
        linearization = SlabLinearization(ctx, U, EXN)
        matrix = linearization.assemble()
        rng = np.random.default_rng(2)
        for _ in range(5):
            dU = rng.normal(size=ctx.layout.size)
            assert matrix @ dU == pytest.approx(linearization.apply(dU), rel=1e-10, abs=1e-10)

    def test_matches_finite_differences(self):
        """exN のスラブ Jacobian は残差の中心差分と一致する"""
        ctx, case = make_context()
        U = manufactured_slab(ctx, case, noise=0.05)
        dU = np.random.default_rng(3).normal(size=ctx.layout.size)
        eps = 1e-6
        difference = -(
            slab_residual(ctx, U + eps * dU, advect=U) - slab_residual(ctx, U - eps * dU, advect=U)
        ) / (2.0 * eps)
        exact = slab_jacobian_apply(ctx, U, EXN, dU, advect=U)
        assert np.linalg.norm(exact - difference) <= 1e-5 * np.linalg.norm(exact)

    def test_block_count_mismatch(self):
        """空間ブロック数が節点数と違えば ValueError"""
        ctx, case = make_context()
        blocks = SlabLinearization(ctx, manufactured_slab(ctx, case), EXN).spatial_blocks()
        with pytest.raises(ValueError, match="空間ブロック数"):
            assemble_slab_matrix(ctx, blocks[:1])


class TestTraces:
    """トレースと初期推定のテスト"""

    def test_left_trace_is_last_node(self):
        """右端の値は最後の節点の速度"""
        ctx, case = make_context()
        U = manufactured_slab(ctx, case)
        assert left_trace(ctx, U) == pytest.approx(ctx.layout.velocity(U)[-1])

    def test_left_endpoint_of_constant(self):
        """定数延長の左端値は流入値そのもの"""
        ctx, _ = make_context(k=3)
        U = initial_guess(ctx)
        assert left_endpoint_value(ctx, U) == pytest.approx(ctx.v_prev)

    def test_initial_guess_keeps_previous_pressure(self):
        """前スラブの圧力を各節点に複製する"""
        ctx, _ = make_context()
        pressure = np.arange(ctx.layout.M_p, dtype=float)
        U = initial_guess(ctx, pressure)
        assert ctx.layout.pressure(U) == pytest.approx(np.tile(pressure, (2, 1)))


class TestNormalizePressure:
    """normalize_pressure関数のテスト"""

    def test_zero_mean_per_node(self):
        """全境界 Dirichlet では各節点で平均 0"""
        ctx, case = make_context()
        U = manufactured_slab(ctx, case) + np.concatenate(
            [np.zeros(ctx.operator.space.M_v), 2.0 * ctx.operator.space.pressure.constant_mode] * 2
        )
        space = ctx.operator.space
        normalized = normalize_pressure(ctx, U)
        for block in ctx.layout.pressure(normalized):
            assert space.pressure.constant_mode @ (space.pressure_mass @ block) == pytest.approx(0.0, abs=1e-14)
        assert ctx.layout.velocity(normalized) == pytest.approx(ctx.layout.velocity(U))

    def test_neumann_leaves_pressure(self):
        """Neumann 境界があれば圧力はそのまま"""
        mesh = uniform_mesh(2, 2)
        ctx, case = make_context(mesh=boundary_tag_assign(mesh, right_edge_neumann(mesh)))
        U = manufactured_slab(ctx, case)
        assert normalize_pressure(ctx, U) is U


class TestMarch:
    """march関数のテスト"""

    def test_chains_slabs(self):
        """各スラブの右端値が次スラブの流入値になる"""
        operator, _ = make_operator()
        partition = TimePartition.uniform(1.0, 3)
        seen = []

        def solver(ctx, U0):
            seen.append(ctx.v_prev.copy())
            return U0 + 1.0, {"slab": ctx.index}

        callback = MagicMock()
        trajectory = march(operator, partition, gauss_radau(1), solver, progress_callback=callback)

        assert len(trajectory.slabs) == 3
        assert [s["slab"] for s in trajectory.stats] == [1, 2, 3]
        assert seen[1] == pytest.approx(seen[0] + 1.0)
        assert seen[2] == pytest.approx(seen[0] + 2.0)
        assert trajectory.final_velocity == pytest.approx(seen[0] + 3.0)
        callback.assert_any_call("スラブ 3/3 を完了しました")
        assert callback.call_count == 3

    def test_failure_records_slab_index(self):
        """失敗したスラブ番号が例外に付与される"""
        operator, _ = make_operator()
        partition = TimePartition.uniform(1.0, 4)

        def solver(ctx, U0):
            if ctx.index == 2:
                raise SlabSolveError("失敗", reason="line_search")
            return U0, None

        with pytest.raises(SlabSolveError) as exc_info:
            march(operator, partition, gauss_radau(0), solver)
        assert exc_info.value.slab_index == 2
        assert exc_info.value.reason == "line_search"
