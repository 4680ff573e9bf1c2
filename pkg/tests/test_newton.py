from unittest.mock import MagicMock

import numpy as np
import pytest

from service.constitutive import ModelParams, TangentKind, TangentVariant
from service.exceptions import KrylovError, SlabSolveError
from service.femspace import MixedSpace
from service.forms import DiscretizationConfig, SpatialOperator
from service.krylov import fgmres
from service.manufactured import ManufacturedCase
from service.mesh import uniform_mesh
from service.multigrid import MgConfig
from service.newton import (
    ArmijoConfig,
    ForcingConfig,
    NewtonConfig,
    SolveStats,
    StepRecord,
    forcing_term,
    nonlinear_solve_slab,
    rebuild_policy,
)
from service.slab import SlabContext, initial_guess, slab_residual
from service.timebasis import gauss_radau

EXN = TangentVariant(TangentKind.EXN)
PIC = TangentVariant(TangentKind.PIC)


def make_context(params, convection=True, cells=4):
    case = ManufacturedCase(params, convection=convection)
    space = MixedSpace(uniform_mesh(cells, cells))
    operator = SpatialOperator(space, case.problem_data(), params, DiscretizationConfig(convection=convection))
    return SlabContext(operator=operator, basis=gauss_radau(1), interval=(0.0, 0.25),
                       v_prev=np.zeros(space.M_v))


class TestConfigs:
    """設定値の検証のテスト"""

    def test_invalid_armijo(self):
        """c1 が (0, 1) の外なら ValueError"""
        with pytest.raises(ValueError, match="c1"):
            ArmijoConfig(c1=1.0)

    def test_invalid_tolerance(self):
        """許容誤差 0 は ValueError"""
        with pytest.raises(ValueError, match="許容誤差"):
            NewtonConfig(abs_tol=0.0)

    def test_invalid_max_nonlinear(self):
        """max_nonlinear 0 は ValueError"""
        with pytest.raises(ValueError, match="max_nonlinear"):
            NewtonConfig(max_nonlinear=0)


class TestForcingTerm:
    """forcing_term関数のテスト"""

    def test_first_iteration_uses_eta0(self):
        """初回は eta0"""
        assert forcing_term(ForcingConfig(), 1.0, None, None, 1e-12) == pytest.approx(1e-2)

    def test_choice_two(self):
        """η = γ(‖R_m‖/‖R_{m-1}‖)²"""
        assert forcing_term(ForcingConfig(), 0.1, 1.0, 0.01, 1e-12) == pytest.approx(0.009)

    def test_safeguard(self):
        """γη_{m-1}² > 0.1 なら下限として使う"""
        assert forcing_term(ForcingConfig(), 0.1, 1.0, 0.5, 1e-12) == pytest.approx(0.225)

    def test_capped_by_eta_max(self):
        """残差が増えても eta_max で頭打ち"""
        assert forcing_term(ForcingConfig(), 2.0, 1.0, 0.01, 1e-12) == pytest.approx(0.9)

    def test_absolute_floor(self):
        """0.5 stop_tol/‖R‖ より小さくしない"""
        assert forcing_term(ForcingConfig(), 1e-11, None, None, 1e-12) == pytest.approx(0.05)


class TestRebuildPolicy:
    """rebuild_policy関数のテスト"""

    @pytest.mark.parametrize("ratio, last, previous, expected", [
        (0.95, None, None, True),
        (0.5, 10, 4, True),
        (0.5, 8, 4, False),
        (None, None, None, False),
        (0.5, 3, 0, False),
    ])
    def test_policy(self, ratio, last, previous, expected):
        """残差比と Krylov 反復数の増え方で判定する"""
        assert rebuild_policy(ratio, last, previous, 0.9, 2.0) is expected


class TestSolveStats:
    """SolveStats のテスト"""

    def test_properties(self):
        """反復回数・Krylov 合計・最小ステップ長"""
        stats = SolveStats(slab_index=1, variant="exn", coarse_mode="galerkin")
        stats.steps = [
            StepRecord(residual_norm=1e-2, step_length=1.0, forcing=0.01, krylov_iterations=5, rebuilt=True),
            StepRecord(residual_norm=1e-5, step_length=0.25, forcing=0.01, krylov_iterations=7, rebuilt=False),
        ]
        assert stats.n_nl == 2
        assert stats.n_l == [5, 7]
        assert stats.n_l_total == 12
        assert stats.rebuilds == 1
        assert stats.lambda_min == 0.25

    def test_empty(self):
        """反復なしなら λ_min = 1"""
        stats = SolveStats(slab_index=1, variant="pic", coarse_mode="galerkin")
        assert stats.n_nl == 0
        assert stats.lambda_min == 1.0


class TestNonlinearSolveSlab:
    """nonlinear_solve_slab関数のテスト"""

    def test_stokes_converges_in_one_step(self):
        """p = 2 で移流なしなら 1 回の Newton 反復で収束する"""
        ctx = make_context(ModelParams(p=2.0, delta=1.0, nu=1e-2), convection=False)
        newton = NewtonConfig(variant=EXN, forcing=ForcingConfig(eta0=1e-12))
        trace = MagicMock()
        U, stats = nonlinear_solve_slab(ctx, initial_guess(ctx), newton, mg=MgConfig(coarse_cells=4), trace=trace)
        assert stats.converged is True
        assert stats.n_nl == 1
        assert stats.steps[0].step_length == 1.0
        trace.info.assert_called_once()
        assert np.all(np.isfinite(U))

    def test_nonlinear_problem_converges(self):
        """シアシニングの問題でも modN は収束し残差が下がる"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        newton = NewtonConfig(rel_tol=1e-8)
        U, stats = nonlinear_solve_slab(ctx, initial_guess(ctx), newton)
        assert stats.converged is True
        final = np.linalg.norm(slab_residual(ctx, U))
        initial = np.linalg.norm(slab_residual(ctx, initial_guess(ctx)))
        assert final < 1e-6 * initial

    def test_max_iterations(self):
        """反復上限に達すると reason=max_iterations"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        newton = NewtonConfig(variant=PIC, abs_tol=1e-30, rel_tol=1e-14, max_nonlinear=1)
        with pytest.raises(SlabSolveError) as exc_info:
            nonlinear_solve_slab(ctx, initial_guess(ctx), newton)
        assert exc_info.value.reason == "max_iterations"
        assert exc_info.value.stats.n_nl == 1

    def test_krylov_failure(self, mocker):
        """FGMRES の失敗は reason=krylov に変換される"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        mocker.patch(
            "service.newton.fgmres",
            side_effect=KrylovError("収束しません", iterations=300, residual_norm=1.0),
        )
        with pytest.raises(SlabSolveError) as exc_info:
            nonlinear_solve_slab(ctx, initial_guess(ctx), NewtonConfig(variant=EXN))
        assert exc_info.value.reason == "krylov"
        assert isinstance(exc_info.value.__cause__, KrylovError)

    def test_truncated_krylov_step_is_used(self, mocker):
        """FGMRES が上限で止まっても相対残差が eta_max 以下ならその近似解で進む"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        calls = {"count": 0}

        def truncated(op, precond, rhs, tol, config, mass=None):
            calls["count"] += 1
            x, iterations = fgmres(op, precond, rhs, tol, config, mass=mass)
            if calls["count"] == 1:
                raise KrylovError("打ち切り", iterations=iterations, residual_norm=0.5, rhs_norm=1.0, solution=x)
            return x, iterations

        mocker.patch("service.newton.fgmres", side_effect=truncated)
        U, stats = nonlinear_solve_slab(ctx, initial_guess(ctx), NewtonConfig(rel_tol=1e-8))
        assert stats.converged is True
        assert calls["count"] == stats.n_nl
        assert np.all(np.isfinite(U))

    def test_stalled_krylov_is_failure(self, mocker):
        """相対残差が eta_max を超えて止まったら reason=krylov"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        mocker.patch(
            "service.newton.fgmres",
            side_effect=KrylovError("停滞", iterations=300, residual_norm=0.95, rhs_norm=1.0,
                                    solution=np.zeros(ctx.layout.size)),
        )
        with pytest.raises(SlabSolveError) as exc_info:
            nonlinear_solve_slab(ctx, initial_guess(ctx), NewtonConfig(variant=EXN))
        assert exc_info.value.reason == "krylov"
        assert "停滞" in str(exc_info.value)

    def test_line_search_failure(self, mocker):
        """残差が減らない方向では reason=line_search"""
        ctx = make_context(ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4))
        size = ctx.layout.size
        calls = {"count": 0}

        def growing_residual(ctx, U, advect=None):
            calls["count"] += 1
            return np.ones(size) * (1.0 if calls["count"] == 1 else 10.0)

        mocker.patch("service.newton.slab_residual", side_effect=growing_residual)
        mocker.patch("service.newton.fgmres", return_value=(np.zeros(size), 2))
        with pytest.raises(SlabSolveError) as exc_info:
            nonlinear_solve_slab(ctx, initial_guess(ctx), NewtonConfig(variant=EXN))
        assert exc_info.value.reason == "line_search"
