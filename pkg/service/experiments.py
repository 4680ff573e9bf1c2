import csv
import logging
import os
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from service.constitutive import (
    FloatArray,
    ModelParams,
    SymTensor2,
    TangentKind,
    TangentVariant,
    tangent_spectrum,
)
from service.exceptions import SlabSolveError
from service.femspace import DEFAULT_QUADRATURE, MixedSpace, interpolate
from service.forms import DiscretizationConfig, SpatialOperator
from service.krylov import KrylovConfig
from service.manufactured import ManufacturedCase, interpolate_state
from service.mesh import uniform_mesh
from service.metrics import eoc, error_norms, slab_dof_count, work
from service.multigrid import MgConfig
from service.newton import NewtonConfig, SolveStats, nonlinear_solve_slab
from service.profiles import RunRecord, format_value
from service.reference import DESK_GRID, FULL_GRID, reference_error_at, reference_errors, reference_iterations
from service.slab import SlabContext, SlabLinearization, SlabSolver, Trajectory, march
from service.timebasis import TimePartition, gauss_radau, quadrature_defect_order
from service.vanka import (
    PatchPerturbation,
    build_patches,
    build_surrogate_patches,
    patch_indices,
    patch_perturbation_report,
)

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str], None]


@dataclass(frozen=True)
class Settings:
    """1 回の実験に必要な設定一式"""

    params: ModelParams
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    mg: MgConfig = field(default_factory=MgConfig)
    degree: int = 1
    end_time: float = 1.0
    quadrature: int = DEFAULT_QUADRATURE
    cells: int = 4
    steps: int = 0

    def __post_init__(self) -> None:
        if self.cells < 1:
            raise ValueError(f"cells は 1 以上で指定してください: {self.cells}")
        if self.steps < 0:
            raise ValueError(f"steps は 0 以上で指定してください: {self.steps}")
        if self.end_time <= 0.0:
            raise ValueError(f"end_time は正の値で指定してください: {self.end_time}")

    def steps_for(self, cells: int) -> int:
        """steps = 0 のときは 1 方向のセル数と同じステップ数"""
        return self.steps if self.steps > 0 else cells

    def variant(self, kind: TangentKind | None = None) -> TangentVariant:
        if kind is None:
            return self.newton.variant
        return TangentVariant(kind, self.newton.variant.sigma_max)


def build_operator(
    settings: Settings, cells: int, params: ModelParams | None = None
) -> tuple[SpatialOperator, ManufacturedCase]:
    params = params or settings.params
    case = ManufacturedCase(params, convection=settings.discretization.convection)
    space = MixedSpace(uniform_mesh(cells, cells), settings.quadrature)
    return SpatialOperator(space, case.problem_data(), params, settings.discretization), case


def make_slab_solver(
    settings: Settings,
    variant: TangentVariant | None = None,
    trace: logging.Logger | None = None,
) -> SlabSolver:
    newton = replace(settings.newton, variant=variant or settings.newton.variant)

    def solve(ctx: SlabContext, U0: FloatArray) -> tuple[FloatArray, SolveStats]:
        return nonlinear_solve_slab(ctx, U0, newton, settings.krylov, settings.mg, trace)
    return solve


def solve_manufactured(
    settings: Settings,
    cells: int,
    steps: int | None = None,
    variant: TangentVariant | None = None,
    params: ModelParams | None = None,
    progress_callback: ProgressCallback | None = None,
    trace: logging.Logger | None = None,
) -> tuple[Trajectory, ManufacturedCase]:
    """解析解の問題を [0, T] で全スラブ解く"""
    operator, case = build_operator(settings, cells, params)
    partition = TimePartition.uniform(settings.end_time, steps or settings.steps_for(cells))
    basis = gauss_radau(settings.degree)
    trajectory = march(
        operator, partition, basis, make_slab_solver(settings, variant, trace),
        progress_callback=progress_callback,
    )
    return trajectory, case


@dataclass(frozen=True)
class ConvergenceRow:
    h: float
    cells: int
    steps: int
    e_phi: float
    e_div: float
    eoc_phi: float | None = None
    eoc_div: float | None = None
    ref_e_phi: float | None = None
    ref_e_div: float | None = None
    dev_e_phi: float | None = None
    dev_e_div: float | None = None


CONVERGENCE_COLUMNS = (
    "h", "cells", "steps", "e_phi", "eoc_phi", "e_div", "eoc_div",
    "ref_e_phi", "ref_e_div", "dev_e_phi", "dev_e_div",
)


def _relative(value: float, reference: float | None) -> float | None:
    if reference is None:
        return None
    return abs(value - reference) / reference


def run_convergence(
    settings: Settings,
    levels: int,
    base_cells: int = 4,
    progress_callback: ProgressCallback | None = None,
    trace: logging.Logger | None = None,
) -> list[ConvergenceRow]:
    """
    h = 1/base_cells から levels 段の一様細分で誤差と eoc を求める

    公表値がある組では参照値と相対偏差も並べる。

    Args:
        settings: 実験設定
        levels: レベル数
        base_cells: 最粗レベルの 1 方向セル数
        progress_callback: 進捗コールバック関数 callback(message: str)
        trace: 反復ごとの記録先

    Returns:
        レベルごとの行

    Raises:
        ValueError: levels が 1 未満
        RuntimeError: 求解中のエラー
    """
    def notify(message: str) -> None:
        if progress_callback:
            progress_callback(message)

    if levels < 1:
        raise ValueError(f"levels は 1 以上で指定してください: {levels}")

    params = settings.params
    reference = reference_errors(params.p, params.delta, params.nu, params.nu_inf)
    try:
        measured = []
        for level in range(levels):
            cells = base_cells * 2**level
            steps = settings.steps_for(cells)
            notify(f"レベル {level + 1}/{levels}: {cells}x{cells} セル, {steps} ステップ")
            trajectory, case = solve_manufactured(settings, cells, steps, trace=trace)
            errors = error_norms(trajectory, case)
            logger.info(f"h=1/{cells}: e_phi={errors.e_phi:.6e}, e_div={errors.e_div:.6e}")
            measured.append((cells, steps, errors))

        rates_phi = [None, *eoc([e.e_phi for _, _, e in measured])] if levels > 1 else [None]
        rates_div = [None, *eoc([e.e_div for _, _, e in measured])] if levels > 1 else [None]
        rows = []
        for (cells, steps, errors), rate_phi, rate_div in zip(measured, rates_phi, rates_div):
            published = reference_error_at(reference, 1.0 / cells) if reference else None
            ref_phi, ref_div = published if published else (None, None)
            rows.append(ConvergenceRow(
                h=1.0 / cells,
                cells=cells,
                steps=steps,
                e_phi=errors.e_phi,
                e_div=errors.e_div,
                eoc_phi=rate_phi,
                eoc_div=rate_div,
                ref_e_phi=ref_phi,
                ref_e_div=ref_div,
                dev_e_phi=_relative(errors.e_phi, ref_phi),
                dev_e_div=_relative(errors.e_div, ref_div),
            ))
        notify("収束試験が完了しました")
        return rows

    except (RuntimeError, ValueError):
        raise
    except Exception as e:
        raise RuntimeError(f"処理中にエラーが発生しました: {e}")


def _write_rows(path: str, columns: Sequence[str], rows: Iterable[dict[str, object]]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({
                key: "" if value is None else format_value(value) for key, value in row.items()
            })


def write_convergence_csv(path: str, rows: Sequence[ConvergenceRow]) -> None:
    _write_rows(path, CONVERGENCE_COLUMNS, (
        {column: getattr(row, column) for column in CONVERGENCE_COLUMNS} for row in rows
    ))


def run_instance(
    settings: Settings,
    params: ModelParams,
    cells: int,
    kind: TangentKind,
    steps: int | None = None,
    trace: logging.Logger | None = None,
) -> RunRecord:
    """
    1 インスタンスを 1 つの線形化で解いて実行記録を作る

    スラブの失敗は success = False として記録し、例外は送出しない。
    """
    steps = steps or settings.steps_for(cells)
    space = MixedSpace(uniform_mesh(cells, cells), settings.quadrature)
    n_dof = slab_dof_count(space, settings.degree)
    base = RunRecord(
        p=params.p, delta=params.delta, nu=params.nu, nu_inf=params.nu_inf,
        cells=cells * cells, steps=steps, solver=str(kind), success=False, n_dof=n_dof, n_slabs=steps,
    )
    start = time.perf_counter()
    try:
        trajectory, case = solve_manufactured(settings, cells, steps, settings.variant(kind), params, trace=trace)
    except SlabSolveError as e:
        logger.warning(
            f"インスタンス p={params.p}, delta={params.delta}, nu={params.nu}, nu_inf={params.nu_inf}, "
            f"cells={cells * cells}, solver={kind} が失敗しました: {e.reason} (スラブ {e.slab_index})"
        )
        return replace(base, wall_s=time.perf_counter() - start)
    wall = time.perf_counter() - start

    stats: list[SolveStats] = trajectory.stats
    errors = error_norms(trajectory, case)
    nonlinear = [slab.n_nl for slab in stats]
    linear = [n for slab in stats for n in slab.n_l]
    published = reference_iterations(params.p, str(kind), cells * cells)
    if published is not None:
        logger.info(f"{kind}: 平均非線形反復数 {np.mean(nonlinear):.2f} (公表値 {published:.2f})")
    return replace(
        base,
        success=True,
        work=work(stats, n_dof),
        mean_nnl=float(np.mean(nonlinear)),
        max_nnl=max(nonlinear),
        mean_nl=float(np.mean(linear)) if linear else 0.0,
        max_nl=max(linear, default=0),
        e_phi=errors.e_phi,
        e_div=errors.e_div,
        wall_s=wall,
        total_nl=sum(linear),
    )


@dataclass(frozen=True)
class SweepInstance:
    params: ModelParams
    cells: int
    kind: TangentKind


def sweep_instances(
    cells_list: Sequence[int],
    kinds: Sequence[TangentKind],
    full_grid: bool = False,
) -> list[SweepInstance]:
    """パラメータ格子 × メッシュ × 線形化の直積"""
    grid = FULL_GRID if full_grid else DESK_GRID
    return [
        SweepInstance(ModelParams(p=p, delta=delta, nu=nu, nu_inf=nu_inf), cells, kind)
        for p, delta, nu, nu_inf in product(grid["p"], grid["delta"], grid["nu"], grid["nu_inf"])
        for cells in cells_list
        for kind in kinds
    ]


def run_sweep(
    settings: Settings,
    instances: Sequence[SweepInstance],
    max_workers: int | None = None,
    progress_callback: ProgressCallback | None = None,
    trace: logging.Logger | None = None,
) -> list[RunRecord]:
    """
    インスタンスを並列に解いて実行記録を集める

    Args:
        settings: 共通設定 (params は各インスタンスで置き換える)
        instances: 実行するインスタンス
        max_workers: 並列数 (None なら CPU 数)
        progress_callback: 進捗コールバック関数 callback(message: str)
        trace: 反復ごとの記録先

    Returns:
        instances と同じ順の実行記録

    Raises:
        ValueError: インスタンスが空
        RuntimeError: 求解以外のエラー
    """
    def notify(message: str) -> None:
        if progress_callback:
            progress_callback(message)

    if not instances:
        raise ValueError("実行するインスタンスがありません")

    records: list[RunRecord | None] = [None] * len(instances)
    completed = 0
    lock = threading.Lock()

    def run_one(index: int) -> None:
        nonlocal completed
        instance = instances[index]
        records[index] = run_instance(settings, instance.params, instance.cells, instance.kind, trace=trace)
        with lock:
            completed += 1
            notify(f"インスタンス {completed}/{len(instances)} を完了しました")

    try:
        max_workers = min(len(instances), max_workers or os.cpu_count() or 1)
        notify(f"スイープを開始します (インスタンス数: {len(instances)}, 並列数: {max_workers})")

        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = [executor.submit(run_one, i) for i in range(len(instances))]
            for future in futures:
                future.result()

        failures = sum(1 for record in records if record is not None and not record.success)
        notify(f"スイープが完了しました (失敗 {failures} 件)")
        return [record for record in records if record is not None]

    except (RuntimeError, ValueError):
        raise
    except Exception as e:
        raise RuntimeError(f"処理中にエラーが発生しました: {e}")


@dataclass(frozen=True)
class HistoryRow:
    t_n: float
    variant: str
    n_nl: int
    n_l_total: int
    lambda_min: float


HISTORY_COLUMNS = ("t_n", "variant", "n_nl", "n_l_total", "lambda_min")


def run_history(
    settings: Settings,
    cells: int,
    kinds: Sequence[TangentKind],
    progress_callback: ProgressCallback | None = None,
    trace: logging.Logger | None = None,
) -> list[HistoryRow]:
    """線形化ごとにスラブ単位の反復数の履歴を集める。失敗したスラブまでを記録する"""
    rows: list[HistoryRow] = []
    steps = settings.steps_for(cells)
    partition = TimePartition.uniform(settings.end_time, steps)
    for kind in kinds:
        try:
            trajectory, _ = solve_manufactured(
                settings, cells, steps, settings.variant(kind),
                progress_callback=progress_callback, trace=trace,
            )
            history = [(ctx.interval[1], slab) for ctx, slab in zip(trajectory.contexts, trajectory.stats)]
        except SlabSolveError as e:
            logger.warning(f"{kind} はスラブ {e.slab_index} で失敗しました: {e.reason}")
            history = []
            if e.stats is not None and e.slab_index is not None:
                history.append((float(partition.t[e.slab_index]), e.stats))
        rows.extend(
            HistoryRow(t_n=t, variant=str(kind), n_nl=slab.n_nl, n_l_total=slab.n_l_total,
                       lambda_min=slab.lambda_min)
            for t, slab in history
        )
    return rows


def write_history_csv(path: str, rows: Sequence[HistoryRow]) -> None:
    _write_rows(path, HISTORY_COLUMNS, (
        {column: getattr(row, column) for column in HISTORY_COLUMNS} for row in rows
    ))


def manufactured_slab(settings: Settings, cells: int, t0: float, tau: float) -> tuple[SlabContext, FloatArray]:
    """[t0, t0+τ] のスラブ文脈と、各時間節点で解析解を離散化したスラブベクトル"""
    operator, case = build_operator(settings, cells)
    space = operator.space
    ctx = SlabContext(
        operator=operator,
        basis=gauss_radau(settings.degree),
        interval=(t0, t0 + tau),
        v_prev=interpolate(space.velocity, case.velocity, t0),
    )
    U = np.concatenate([interpolate_state(case, space, float(t)) for t in ctx.node_times])
    return ctx, U


def patch_report(
    settings: Settings,
    cells: int,
    tau: float,
    t0: float = 0.25,
    kind: TangentKind | None = None,
) -> list[PatchPerturbation]:
    """解析解の状態で厳密パッチと代理パッチを比べる"""
    if tau <= 0.0:
        raise ValueError(f"tau は正の値で指定してください: {tau}")
    ctx, U = manufactured_slab(settings, cells, t0, tau)
    variant = settings.variant(kind)
    indices = patch_indices(ctx.operator.space, ctx.layout.num_nodes)
    exact = build_patches(SlabLinearization(ctx, U, variant).assemble(), indices)
    surrogate = build_surrogate_patches(ctx, U, variant, indices, settings.mg.rep_point)
    report = patch_perturbation_report(exact, surrogate)
    if report:
        median = float(np.median([entry.epsilon for entry in report]))
        logger.info(f"tau={tau:.3e}: パッチ {len(report)} 個, ε の中央値 {median:.3e}")
    return report


PATCH_COLUMNS = (
    "cell", "error_norm", "epsilon", "spectral_deviation", "within_disk", "inverse_bound", "singular_bracket",
)


def write_patch_csv(path: str, report: Sequence[PatchPerturbation]) -> None:
    _write_rows(path, PATCH_COLUMNS, (
        {column: getattr(entry, column) for column in PATCH_COLUMNS} for entry in report
    ))


@dataclass(frozen=True)
class SpectrumRow:
    norm_a: float
    lambda_perp: float
    lambda_par: float
    ratio: float
    s: float


SPECTRUM_COLUMNS = ("norm_a", "lambda_perp", "lambda_par", "ratio", "s")


def tangent_spectrum_rows(
    params: ModelParams,
    variant: TangentVariant,
    magnitudes: Sequence[float] | FloatArray | None = None,
) -> list[SpectrumRow]:
    """トレース 0 の方向 diag(1, -1)/√2 に沿って |A| を変えたときの接線固有値"""
    if magnitudes is None:
        magnitudes = np.geomspace(1e-6, 1e6, 25)
    rows = []
    for magnitude in magnitudes:
        component = float(magnitude) / np.sqrt(2.0)
        spectrum = tangent_spectrum(variant, params, SymTensor2(component, -component, 0.0))
        rows.append(SpectrumRow(
            norm_a=float(magnitude),
            lambda_perp=spectrum.lambda_perp,
            lambda_par=spectrum.lambda_par,
            ratio=spectrum.ratio,
            s=spectrum.s,
        ))
    return rows


def write_spectrum_csv(path: str, rows: Sequence[SpectrumRow]) -> None:
    _write_rows(path, SPECTRUM_COLUMNS, (
        {column: getattr(row, column) for column in SPECTRUM_COLUMNS} for row in rows
    ))


@dataclass(frozen=True)
class QuadcheckRow:
    k: int
    order: float | None
    expected: int
    exact: bool


QUADCHECK_COLUMNS = ("k", "order", "expected", "exact")


def quadcheck_rows(
    degrees: Sequence[int],
    tau_list: Sequence[float] = (0.5, 0.25, 0.125, 0.0625),
    f: Callable[[FloatArray], FloatArray] = np.exp,
) -> list[QuadcheckRow]:
    """Gauss-Radau 則の 1 区間欠損の観測次数 (期待値 2k+2)"""
    rows = []
    for k in degrees:
        report = quadrature_defect_order(k, f, tau_list)
        rows.append(QuadcheckRow(k=k, order=report.order, expected=2 * k + 2, exact=report.exact))
    return rows


def write_quadcheck_csv(path: str, rows: Sequence[QuadcheckRow]) -> None:
    _write_rows(path, QUADCHECK_COLUMNS, (
        {column: getattr(row, column) for column in QUADCHECK_COLUMNS} for row in rows
    ))
