import logging
from dataclasses import dataclass, field

import numpy as np

from service.constitutive import FloatArray, TangentKind, TangentVariant
from service.exceptions import KrylovError, SlabSolveError
from service.krylov import KrylovConfig, fgmres, mass_weighted_norm
from service.multigrid import MgConfig, SpaceTimeMultigrid
from service.slab import SlabContext, SlabLinearization, slab_residual

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArmijoConfig:
    c1: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 2.0**-10

    def __post_init__(self) -> None:
        if not 0.0 < self.c1 < 1.0:
            raise ValueError(f"c1 は 0 < c1 < 1 で指定してください: {self.c1}")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError(f"backtrack は 0 < backtrack < 1 で指定してください: {self.backtrack}")


@dataclass(frozen=True)
class ForcingConfig:
    """Eisenstat-Walker 第 2 選択の係数"""

    eta0: float = 1e-2
    exponent: float = 2.0
    gamma: float = 0.9
    eta_max: float = 0.9


@dataclass(frozen=True)
class NewtonConfig:
    variant: TangentVariant = field(default_factory=lambda: TangentVariant(TangentKind.MODN))
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_nonlinear: int = 50
    armijo: ArmijoConfig = field(default_factory=ArmijoConfig)
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    picard_fixed_tol: float = 1e-4

    def __post_init__(self) -> None:
        if self.abs_tol <= 0.0 or self.rel_tol <= 0.0 or self.picard_fixed_tol <= 0.0:
            raise ValueError("許容誤差は正の値で指定してください")
        if self.max_nonlinear < 1:
            raise ValueError(f"max_nonlinear は 1 以上で指定してください: {self.max_nonlinear}")


@dataclass(frozen=True)
class StepRecord:
    residual_norm: float
    step_length: float
    forcing: float
    krylov_iterations: int
    rebuilt: bool


@dataclass
class SolveStats:
    """1 スラブ分の反復履歴"""

    slab_index: int
    variant: str
    coarse_mode: str
    initial_residual: float = 0.0
    final_residual: float = 0.0
    converged: bool = False
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def n_nl(self) -> int:
        return len(self.steps)

    @property
    def n_l(self) -> list[int]:
        return [step.krylov_iterations for step in self.steps]

    @property
    def n_l_total(self) -> int:
        return sum(self.n_l)

    @property
    def rebuilds(self) -> int:
        return sum(1 for step in self.steps if step.rebuilt)

    @property
    def lambda_min(self) -> float:
        return min((step.step_length for step in self.steps), default=1.0)


def rebuild_policy(
    residual_ratio: float | None,
    last_n_l: int | None,
    previous_n_l: int | None,
    rho: float,
    factor: float,
) -> bool:
    """残差比が rho を超えるか、Krylov 反復数が前回の factor 倍を超えたら再構築"""
    if residual_ratio is not None and residual_ratio > rho:
        return True
    if last_n_l is not None and previous_n_l is not None and previous_n_l > 0:
        return last_n_l > factor * previous_n_l
    return False


def forcing_term(
    config: ForcingConfig,
    residual_norm: float,
    previous_norm: float | None,
    previous_eta: float | None,
    stop_tol: float,
) -> float:
    """
    Eisenstat-Walker 第 2 選択 η = γ(‖R_m‖/‖R_{m-1}‖)^α と安全策

    η‖R_m‖ が停止判定の残差 stop_tol の半分を下回らないように下限を付ける。
    """
    if previous_norm is None or previous_eta is None or previous_norm == 0.0:
        eta = config.eta0
    else:
        eta = config.gamma * (residual_norm / previous_norm) ** config.exponent
        safeguard = config.gamma * previous_eta**config.exponent
        if safeguard > 0.1:
            eta = max(eta, safeguard)
    eta = min(eta, config.eta_max)
    if residual_norm > 0.0:
        eta = max(eta, 0.5 * stop_tol / residual_norm)
    return eta


def nonlinear_solve_slab(
    ctx: SlabContext,
    U0: FloatArray,
    newton: NewtonConfig,
    krylov: KrylovConfig = KrylovConfig(),
    mg: MgConfig = MgConfig(),
    trace: logging.Logger | None = None,
) -> tuple[FloatArray, SolveStats]:
    """
    1 スラブの非線形方程式 R_n(U) = 0 を Newton-Krylov 反復で解く

    Picard は λ = 1 と固定の Krylov 許容誤差、exN と modN は Eisenstat-Walker の
    許容誤差と Armijo 後退を使う。
    FGMRES が反復上限に達しても相対残差が forcing.eta_max 以下なら、その近似解を方向に使う。

    Args:
        ctx: スラブの文脈
        U0: 初期値
        newton: 非線形反復の設定
        krylov: FGMRES の設定
        mg: 前処理の設定
        trace: 反復ごとの記録先

    Returns:
        (解, 反復統計)

    Raises:
        SlabSolveError: 直線探索・最大反復数・Krylov のいずれかで失敗
    """
    variant = newton.variant
    picard = variant.kind == TangentKind.PIC
    stats = SolveStats(slab_index=ctx.index, variant=str(variant.kind), coarse_mode=str(mg.coarse_mode))
    mass = ctx.block_mass
    multigrid = SpaceTimeMultigrid(ctx, mg)

    U = U0.copy()
    residual = slab_residual(ctx, U)
    norm = mass_weighted_norm(residual, mass)
    stats.initial_residual = norm
    stats.final_residual = norm
    initial = norm
    stop_tol = max(newton.abs_tol, newton.rel_tol * initial)

    previous_norm: float | None = None
    previous_eta: float | None = None
    for m in range(newton.max_nonlinear + 1):
        if norm <= stop_tol:
            stats.converged = True
            logger.info(
                f"スラブ {ctx.index}: {stats.n_nl} 回で収束しました "
                f"(残差 {norm:.3e}, Krylov 合計 {stats.n_l_total})"
            )
            return U, stats
        if m == newton.max_nonlinear:
            break

        ratio = None if previous_norm is None else norm / previous_norm
        n_l = stats.n_l
        rebuild = m == 0 or rebuild_policy(
            ratio,
            n_l[-1] if n_l else None,
            n_l[-2] if len(n_l) > 1 else None,
            mg.rebuild_ratio,
            mg.rebuild_factor,
        )
        linearization = SlabLinearization(ctx, U, variant)
        multigrid.update(U, variant, linearization, rebuild)

        eta = newton.picard_fixed_tol if picard else forcing_term(
            newton.forcing, norm, previous_norm, previous_eta, stop_tol
        )
        try:
            step, iterations = fgmres(linearization.apply, multigrid, residual, eta, krylov, mass=mass)
        except KrylovError as e:
            achieved = e.relative_residual
            if e.solution is None or achieved is None or achieved > newton.forcing.eta_max:
                raise SlabSolveError(
                    f"スラブ {ctx.index} の線形求解に失敗しました: {e}", reason="krylov", stats=stats
                ) from e
            logger.warning(
                f"スラブ {ctx.index}: FGMRES が η={eta:.3e} に届かず相対残差 {achieved:.3e} で打ち切りました"
            )
            step, iterations = e.solution, e.iterations

        length = 1.0
        trial = U + step
        trial_residual = slab_residual(ctx, trial)
        trial_norm = mass_weighted_norm(trial_residual, mass)
        if not picard:
            merit = 0.5 * norm**2
            while 0.5 * trial_norm**2 > (1.0 - newton.armijo.c1 * length) * merit:
                length *= newton.armijo.backtrack
                if length < newton.armijo.min_step:
                    raise SlabSolveError(
                        f"スラブ {ctx.index} の直線探索が失敗しました (λ < {newton.armijo.min_step})",
                        reason="line_search",
                        stats=stats,
                    )
                trial = U + length * step
                trial_residual = slab_residual(ctx, trial)
                trial_norm = mass_weighted_norm(trial_residual, mass)

        stats.steps.append(StepRecord(
            residual_norm=trial_norm,
            step_length=length,
            forcing=eta,
            krylov_iterations=iterations,
            rebuilt=rebuild,
        ))
        message = (
            f"slab={ctx.index} m={m + 1} residual={trial_norm:.6e} lambda={length:.4g} "
            f"eta={eta:.3e} n_L={iterations} rebuild={rebuild}"
        )
        logger.debug(message)
        if trace is not None:
            trace.info(message)

        previous_norm, previous_eta = norm, eta
        U, residual, norm = trial, trial_residual, trial_norm
        stats.final_residual = norm
        if not np.isfinite(norm):
            break

    raise SlabSolveError(
        f"スラブ {ctx.index} が {newton.max_nonlinear} 回以内に収束しませんでした (残差 {norm:.3e})",
        reason="max_iterations",
        stats=stats,
    )
