import csv
from dataclasses import replace
from types import SimpleNamespace
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from service.constitutive import ModelParams, TangentKind, TangentVariant
from service.exceptions import SlabSolveError
from service.experiments import (
    CONVERGENCE_COLUMNS,
    ConvergenceRow,
    QuadcheckRow,
    Settings,
    SweepInstance,
    patch_report,
    quadcheck_rows,
    run_convergence,
    run_history,
    run_instance,
    run_sweep,
    solve_manufactured,
    sweep_instances,
    tangent_spectrum_rows,
    write_convergence_csv,
    write_quadcheck_csv,
)
from service.krylov import mass_weighted_norm
from service.newton import SolveStats, StepRecord
from service.profiles import RunRecord, dolan_more
from utils.config_manager import build_settings, load_config

PARAMS = ModelParams(p=1.5, delta=1e-2, nu=1e-1, nu_inf=1e-4)
REFERENCE_PARAMS = ModelParams(p=1.5, delta=1e-15, nu=1e-2, nu_inf=0.0)


def fake_record(settings, params, cells, kind, steps=None, trace=None):
    return RunRecord(p=params.p, delta=params.delta, nu=params.nu, nu_inf=params.nu_inf,
                     cells=cells * cells, steps=cells, solver=str(kind), success=kind != TangentKind.PIC, work=cells)


def assert_slabs_converged(trajectory, settings):
    newton = settings.newton
    for stats in trajectory.stats:
        assert stats.converged, f"スラブ {stats.slab_index}"
        assert stats.final_residual <= max(newton.abs_tol, newton.rel_tol * stats.initial_residual)


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.reader(f))


class TestSettings:
    """Settings のテスト"""

    def test_steps_follow_cells(self):
        """steps = 0 なら 1 方向セル数と同じ"""
        settings = Settings(PARAMS)
        assert settings.steps_for(8) == 8
        assert Settings(PARAMS, steps=3).steps_for(8) == 3

    def test_variant_override(self):
        """kind を指定すれば sigma_max を保ったまま置き換える"""
        settings = Settings(PARAMS)
        assert settings.variant() == settings.newton.variant
        assert settings.variant(TangentKind.PIC).kind == TangentKind.PIC

    @pytest.mark.parametrize("kwargs, message", [
        ({"cells": 0}, "cells"),
        ({"steps": -1}, "steps"),
        ({"end_time": 0.0}, "end_time"),
    ])
    def test_invalid(self, kwargs, message):
        """範囲外の値は ValueError"""
        with pytest.raises(ValueError, match=message):
            Settings(PARAMS, **kwargs)


class TestRunConvergence:
    """run_convergence関数のテスト"""

    @patch("service.experiments.error_norms")
    @patch("service.experiments.solve_manufactured")
    def test_rows_with_reference(self, mock_solve, mock_errors):
        """eoc と公表値からの相対偏差を並べる"""
        mock_solve.return_value = (MagicMock(), MagicMock())
        mock_errors.side_effect = [
            SimpleNamespace(e_phi=4.87470e-01, e_div=2.9097e-01),
            SimpleNamespace(e_phi=1.90222e-01, e_div=6.4618e-02),
        ]
        callback = MagicMock()

        rows = run_convergence(Settings(REFERENCE_PARAMS), levels=2, progress_callback=callback)

        assert [row.cells for row in rows] == [4, 8]
        assert [row.steps for row in rows] == [4, 8]
        assert rows[0].eoc_phi is None
        assert rows[1].eoc_phi == pytest.approx(1.357, abs=1e-3)
        assert rows[1].dev_e_phi == pytest.approx(0.0, abs=1e-12)
        assert rows[0].ref_e_div == pytest.approx(2.9097e-01)
        callback.assert_any_call("レベル 2/2: 8x8 セル, 8 ステップ")
        callback.assert_called_with("収束試験が完了しました")

    @patch("service.experiments.error_norms")
    @patch("service.experiments.solve_manufactured")
    def test_without_reference(self, mock_solve, mock_errors):
        """公表値のない組では参照列は None"""
        mock_solve.return_value = (MagicMock(), MagicMock())
        mock_errors.return_value = SimpleNamespace(e_phi=0.1, e_div=0.01)
        rows = run_convergence(Settings(PARAMS), levels=1)
        assert rows[0].ref_e_phi is None
        assert rows[0].dev_e_div is None

    def test_invalid_levels(self):
        """levels 0 は ValueError"""
        with pytest.raises(ValueError, match="levels"):
            run_convergence(Settings(PARAMS), levels=0)

    @patch("service.experiments.solve_manufactured", side_effect=KeyError("x"))
    def test_unexpected_error_wrapped(self, mock_solve):
        """想定外の例外は RuntimeError に包む"""
        with pytest.raises(RuntimeError) as exc_info:
            run_convergence(Settings(PARAMS), levels=1)
        assert "処理中にエラーが発生しました" in str(exc_info.value)


class TestRunInstance:
    """run_instance関数のテスト"""

    @patch("service.experiments.solve_manufactured")
    def test_failure_is_recorded(self, mock_solve):
        """スラブの失敗は success = False の記録になる"""
        mock_solve.side_effect = SlabSolveError("失敗", reason="line_search", slab_index=2)
        record = run_instance(Settings(PARAMS), PARAMS, 4, TangentKind.EXN)
        assert record.success is False
        assert record.cells == 16
        assert record.steps == 4
        assert record.solver == "exn"
        assert record.work == 0
        assert record.n_dof == 2 * (162 + 48)

    def test_solves_small_instance(self):
        """小さな問題を解いて仕事量と誤差を記録する"""
        settings = Settings(PARAMS)
        record = run_instance(settings, PARAMS, 4, TangentKind.MODN)
        assert record.success is True
        assert record.work > 0
        assert record.max_nnl >= 1
        assert record.e_phi > 0.0
        assert record.total_nl * record.n_dof == record.work


class TestSweepInstances:
    """sweep_instances関数のテスト"""

    def test_desk_grid_size(self):
        """小格子は 16 組 × メッシュ × 線形化"""
        instances = sweep_instances([4, 8], [TangentKind.PIC, TangentKind.MODN])
        assert len(instances) == 16 * 2 * 2
        assert instances[0] == SweepInstance(ModelParams(p=1.25, delta=1e-5, nu=1e-2, nu_inf=0.0), 4,
                                             TangentKind.PIC)

    def test_full_grid_size(self):
        """全格子は 144 組"""
        assert len(sweep_instances([4], [TangentKind.EXN], full_grid=True)) == 144


class TestRunSweep:
    """run_sweep関数のテスト"""

    @patch("service.experiments.run_instance", side_effect=fake_record)
    def test_keeps_order_and_notifies(self, mock_run):
        """並列実行でも入力順の記録を返し、進捗を通知する"""
        instances = [
            SweepInstance(PARAMS, cells, kind)
            for cells in (4, 8)
            for kind in (TangentKind.PIC, TangentKind.EXN)
        ]
        callback = MagicMock()

        records = run_sweep(Settings(PARAMS), instances, max_workers=3, progress_callback=callback)

        assert [(r.cells, r.solver) for r in records] == [(16, "pic"), (16, "exn"), (64, "pic"), (64, "exn")]
        assert mock_run.call_count == 4
        callback.assert_any_call("スイープを開始します (インスタンス数: 4, 並列数: 3)")
        callback.assert_any_call("インスタンス 4/4 を完了しました")
        callback.assert_called_with("スイープが完了しました (失敗 2 件)")

    def test_empty(self):
        """インスタンスが空なら ValueError"""
        with pytest.raises(ValueError) as exc_info:
            run_sweep(Settings(PARAMS), [])
        assert "実行するインスタンスがありません" in str(exc_info.value)

    @patch("service.experiments.run_instance", side_effect=TypeError("壊れた記録"))
    def test_unexpected_error_wrapped(self, mock_run):
        """求解以外の例外は RuntimeError に包む"""
        with pytest.raises(RuntimeError) as exc_info:
            run_sweep(Settings(PARAMS), [SweepInstance(PARAMS, 4, TangentKind.EXN)])
        assert "壊れた記録" in str(exc_info.value)


class TestRunHistory:
    """run_history関数のテスト"""

    @patch("service.experiments.solve_manufactured")
    def test_failed_slab_is_last_row(self, mock_solve):
        """失敗した線形化は失敗スラブの統計を 1 行残す"""
        stats = SolveStats(slab_index=2, variant="exn", coarse_mode="galerkin")
        stats.steps = [StepRecord(residual_norm=1.0, step_length=0.5, forcing=0.1, krylov_iterations=9,
                                  rebuilt=True)]
        mock_solve.side_effect = SlabSolveError("失敗", reason="line_search", stats=stats, slab_index=2)

        rows = run_history(Settings(PARAMS), 4, [TangentKind.EXN])

        assert len(rows) == 1
        assert rows[0].t_n == pytest.approx(0.5)
        assert rows[0].variant == "exn"
        assert rows[0].n_l_total == 9
        assert rows[0].lambda_min == 0.5


class TestPatchReport:
    """patch_report関数のテスト"""

    def test_piecewise_constant_in_time(self):
        """k = 0 では代理パッチが厳密パッチと一致する"""
        report = patch_report(Settings(PARAMS, degree=0), 2, 0.1)
        assert len(report) == 4
        assert all(entry.epsilon == pytest.approx(0.0, abs=1e-12) for entry in report)

    def test_invalid_tau(self):
        """tau が 0 以下なら ValueError"""
        with pytest.raises(ValueError, match="tau"):
            patch_report(Settings(PARAMS), 2, 0.0)


class TestTangentSpectrumRows:
    """tangent_spectrum_rows関数のテスト"""

    def test_exact_ratio_limit(self):
        """exN の比は |A| が大きいと 1/(p-1) に近づく"""
        params = ModelParams(p=1.5, delta=1e-5, nu=1e-2, nu_inf=0.0)
        rows = tangent_spectrum_rows(params, TangentVariant(TangentKind.EXN), [1e6])
        assert rows[0].ratio == pytest.approx(2.0, rel=1e-6)
        assert rows[0].s == 1.0

    def test_picard_is_isotropic(self):
        """Picard では λ⊥ = λ∥"""
        rows = tangent_spectrum_rows(PARAMS, TangentVariant(TangentKind.PIC), [1e-3, 1.0, 1e3])
        assert [row.ratio for row in rows] == pytest.approx([1.0, 1.0, 1.0])

    def test_default_magnitudes(self):
        """既定では 1e-6 から 1e6 の 25 点"""
        rows = tangent_spectrum_rows(PARAMS, TangentVariant(TangentKind.MODN))
        assert len(rows) == 25
        assert rows[0].norm_a == pytest.approx(1e-6)
        assert rows[-1].norm_a == pytest.approx(1e6)


class TestQuadcheckRows:
    """quadcheck_rows関数のテスト"""

    def test_observed_order(self):
        """観測次数は 2k+2 に近い"""
        rows = quadcheck_rows([0, 1])
        assert [row.expected for row in rows] == [2, 4]
        for row in rows:
            assert row.exact is False
            assert row.order == pytest.approx(row.expected, abs=0.3)

    def test_polynomial_is_exact(self):
        """次数 2k 以下の多項式なら欠損は丸め誤差だけ"""
        rows = quadcheck_rows([2], f=lambda t: t**4)
        assert rows[0].exact is True
        assert rows[0].order is None


class TestWriters:
    """CSV 書き出しのテスト"""

    def test_convergence_csv(self, tmp_path):
        """None は空欄で書く"""
        path = tmp_path / "out" / "convergence.csv"
        write_convergence_csv(str(path), [ConvergenceRow(h=0.25, cells=4, steps=4, e_phi=0.5, e_div=0.25)])
        rows = read_csv(path)
        assert rows[0] == list(CONVERGENCE_COLUMNS)
        assert rows[1][1] == "4"
        assert rows[1][4] == ""
        assert float(rows[1][3]) == 0.5

    def test_quadcheck_csv(self, tmp_path):
        """真偽値と欠測の次数"""
        path = tmp_path / "quadcheck.csv"
        write_quadcheck_csv(str(path), [QuadcheckRow(k=1, order=None, expected=4, exact=True)])
        assert read_csv(path) == [["k", "order", "expected", "exact"], ["1", "", "4", "True"]]

    def test_values_round_trip_as_float(self, tmp_path):
        """浮動小数点は誤差なく読み戻せる"""
        path = tmp_path / "convergence.csv"
        value = float(np.pi) / 7.0
        write_convergence_csv(str(path), [ConvergenceRow(h=0.5, cells=2, steps=2, e_phi=value, e_div=0.0)])
        assert float(read_csv(path)[1][3]) == value


class TestSolveManufactured:
    """solve_manufactured関数のテスト"""

    def test_march_reaches_tolerance(self):
        """同梱の設定と 2 レベルの V サイクルで全スラブが停止判定の残差まで下がる"""
        settings = build_settings(load_config(), {})
        settings = replace(settings, mg=replace(settings.mg, coarse_cells=2))
        trajectory, _ = solve_manufactured(settings, 4, 2)
        assert len(trajectory.stats) == 2
        assert_slabs_converged(trajectory, settings)

    @pytest.mark.slow
    def test_modified_newton_march_8x8(self):
        """8x8 セル 8 ステップの DG(1) modN で全スラブが収束する"""
        settings = build_settings(load_config(), {})
        assert settings.degree == 1
        assert settings.newton.variant.kind == TangentKind.MODN
        trajectory, _ = solve_manufactured(settings, 8, 8)
        assert len(trajectory.stats) == 8
        assert_slabs_converged(trajectory, settings)
        assert all(stats.final_residual <= 1e-10 for stats in trajectory.stats)


@pytest.mark.slow
class TestConvergenceStudy:
    """解析解での収束試験 (実験規模)"""

    def test_errors_decrease(self):
        """h を半分にすると両方の誤差が下がり eoc は正"""
        rows = run_convergence(Settings(REFERENCE_PARAMS), levels=2)
        assert rows[1].e_phi < rows[0].e_phi
        assert rows[1].e_div < rows[0].e_div
        assert rows[1].eoc_phi is not None and rows[1].eoc_phi > 0.5
        assert rows[0].ref_e_phi == pytest.approx(4.87470e-01)

    def test_four_levels(self):
        """4 レベルで誤差は単調に減り、eoc_phi は 0.9 から 1.6、eoc_div は 2 以上"""
        rows = run_convergence(Settings(REFERENCE_PARAMS), levels=4)
        assert [row.cells for row in rows] == [4, 8, 16, 32]
        for coarse, fine in zip(rows, rows[1:]):
            assert fine.e_phi < coarse.e_phi
            assert fine.e_div < coarse.e_div
        for row in rows[1:]:
            assert 0.9 <= row.eoc_phi <= 1.6
            assert row.eoc_div >= 2.0

    def test_quadrature_order_up_to_four(self):
        """k = 0..3 の観測次数は 2k+2"""
        for row in quadcheck_rows([0, 1, 2, 3], tau_list=(0.4, 0.2, 0.1)):
            assert row.exact or row.order == pytest.approx(row.expected, abs=0.5)


ROBUSTNESS_PARAMS = {p: ModelParams(p=p, delta=1e-5, nu=1e-3, nu_inf=0.0) for p in (1.5, 1.25, 1.16)}


@pytest.mark.slow
class TestRobustnessStudy:
    """p を 1 に近づけたときの線形化の頑健性 (実験規模)"""

    @pytest.mark.parametrize("p", [1.5, 1.25])
    def test_modified_newton_iterations(self, p):
        """16, 64, 256 セルで modN の平均非線形反復数は 12 以下"""
        settings = Settings(ROBUSTNESS_PARAMS[p])
        for cells in (4, 8, 16):
            record = run_instance(settings, ROBUSTNESS_PARAMS[p], cells, TangentKind.MODN)
            assert record.success, f"cells={cells * cells}"
            assert record.mean_nnl <= 12.0

    def test_modified_newton_near_one(self):
        """p = 1.16 でも modN は解ける"""
        params = ROBUSTNESS_PARAMS[1.16]
        for cells in (4, 8, 16):
            assert run_instance(Settings(params), params, cells, TangentKind.MODN).success

    def test_exact_newton_needs_more_steps(self):
        """細かい 2 つのメッシュでは exN の平均非線形反復数が modN を上回る (失敗も上回るとみなす)"""
        params = ROBUSTNESS_PARAMS[1.25]
        settings = Settings(params)
        for cells in (8, 16):
            modn = run_instance(settings, params, cells, TangentKind.MODN)
            exn = run_instance(settings, params, cells, TangentKind.EXN)
            assert modn.success
            assert not exn.success or exn.mean_nnl > modn.mean_nnl


@pytest.mark.slow
class TestMultigridStudy:
    """時空間マルチグリッドの h 依存性 (実験規模)"""

    def test_krylov_iterations_bounded_under_refinement(self):
        """64 セルから 1024 セルで Newton 1 回あたりの FGMRES 反復数の増加は 2 倍以内"""
        params = ModelParams(p=1.25, delta=1e-5, nu=1e-3, nu_inf=0.0)
        settings = Settings(params)
        coarse = run_instance(settings, params, 8, TangentKind.MODN, steps=4)
        fine = run_instance(settings, params, 32, TangentKind.MODN, steps=4)
        assert coarse.success and fine.success
        assert coarse.cells == 64 and fine.cells == 1024
        assert fine.mean_nl <= 2.0 * coarse.mean_nl


@pytest.mark.slow
class TestSurrogatePatchStudy:
    """代理パッチの摂動量の τ 依存性 (実験規模)"""

    def test_epsilon_halves_with_tau(self):
        """τ を半分にするごとに ε の中央値は 1.5 倍から 3 倍小さくなる"""
        settings = build_settings(load_config(), {})
        medians = [
            float(np.median([entry.epsilon for entry in patch_report(settings, 4, tau)]))
            for tau in (1 / 4, 1 / 8, 1 / 16, 1 / 32)
        ]
        for larger, smaller in zip(medians, medians[1:]):
            assert 1.5 <= larger / smaller <= 3.0


@pytest.mark.slow
class TestVariantAgreement:
    """線形化によらず同じ離散解に収束することの確認 (実験規模)"""

    def test_final_slabs_agree(self):
        """64 セルで Picard / exN / modN の最終スラブが質量重み付きノルムで 1e-8 以内に一致する"""
        settings = Settings(PARAMS)
        trajectories = {
            kind: solve_manufactured(settings, 8, 2, settings.variant(kind))[0]
            for kind in (TangentKind.PIC, TangentKind.EXN, TangentKind.MODN)
        }
        for trajectory in trajectories.values():
            assert_slabs_converged(trajectory, settings)
        finals = {kind: trajectory.slabs[-1] for kind, trajectory in trajectories.items()}
        mass = trajectories[TangentKind.MODN].contexts[-1].block_mass

        reference = finals[TangentKind.MODN]
        scale = max(1.0, mass_weighted_norm(reference, mass))
        for kind in (TangentKind.PIC, TangentKind.EXN):
            assert mass_weighted_norm(finals[kind] - reference, mass) <= 1e-8 * scale


@pytest.mark.slow
class TestProfileStudy:
    """実際のスイープから作る性能プロファイル (実験規模)"""

    def test_profile_from_sweep(self):
        """π_s は単調非減少で、π_s(∞) は成功率に等しい"""
        kinds = [TangentKind.PIC, TangentKind.EXN, TangentKind.MODN]
        records = run_sweep(Settings(PARAMS), sweep_instances([2], kinds), max_workers=2)
        table = dolan_more(records, tau_grid=[1.0, 1.5, 2.0, 4.0, 8.0, np.inf])

        for kind in kinds:
            solver = str(kind)
            values = table.profile(solver)
            own = [record for record in records if record.solver == solver]
            assert np.all(np.diff(values) >= 0.0)
            assert values[-1] == pytest.approx(sum(record.success for record in own) / len(own))
            assert table.success_fraction(solver) == pytest.approx(values[-1])
