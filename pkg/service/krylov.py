import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from service.constitutive import FloatArray
from service.exceptions import KrylovError

logger = logging.getLogger(__name__)

LinearMap = Callable[[FloatArray], FloatArray]


@dataclass(frozen=True)
class KrylovConfig:
    restart: int = 60
    max_iterations: int = 300

    def __post_init__(self) -> None:
        if self.restart < 1 or self.max_iterations < 1:
            raise ValueError(
                f"restart と max_iterations は正の整数で指定してください: "
                f"restart={self.restart}, max_iterations={self.max_iterations}"
            )


def mass_weighted_norm(r: FloatArray, mass: sp.spmatrix | None = None) -> float:
    """√(rᵀ W r)。mass が None ならユークリッドノルム"""
    if mass is None:
        return float(np.linalg.norm(r))
    return float(np.sqrt(max(float(r @ (mass @ r)), 0.0)))


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    radius = float(np.hypot(a, b))
    return a / radius, b / radius


def fgmres(
    op: LinearMap,
    precond: LinearMap | None,
    rhs: FloatArray,
    tol: float,
    config: KrylovConfig = KrylovConfig(),
    mass: sp.spmatrix | None = None,
    x0: FloatArray | None = None,
) -> tuple[FloatArray, int]:
    """
    右前処理付き柔軟 GMRES (再始動あり)

    内積は W = mass による重み付き内積。前処理は反復ごとに変わってもよい。

    Args:
        op: 係数行列の作用
        precond: 前処理の作用 (None なら恒等)
        rhs: 右辺
        tol: 右辺の W ノルムに対する相対許容誤差
        config: 再始動長と最大反復数
        mass: 内積の重み行列
        x0: 初期値

    Returns:
        (解, 反復回数)

    Raises:
        KrylovError: 最大反復数以内に収束しない (最後の近似解を solution に持つ)
    """
    def inner(a: FloatArray, b: FloatArray) -> float:
        return float(a @ (b if mass is None else mass @ b))

    def norm(a: FloatArray) -> float:
        return float(np.sqrt(max(inner(a, a), 0.0)))

    apply_precond = precond if precond is not None else (lambda v: v)
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    rhs_norm = norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0
    target = tol * rhs_norm

    iterations = 0
    residual = rhs - op(x)
    beta = norm(residual)
    while iterations < config.max_iterations:
        if beta <= target:
            return x, iterations
        m = min(config.restart, config.max_iterations - iterations)
        basis = np.zeros((m + 1, rhs.size))
        directions = np.zeros((m, rhs.size))
        hessenberg = np.zeros((m + 1, m))
        cosines = np.zeros(m)
        sines = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        basis[0] = residual / beta

        used = 0
        for j in range(m):
            directions[j] = apply_precond(basis[j])
            w = np.array(op(directions[j]), dtype=np.float64)
            for i in range(j + 1):
                hessenberg[i, j] = inner(basis[i], w)
                w -= hessenberg[i, j] * basis[i]
            hessenberg[j + 1, j] = norm(w)
            column_norm = float(np.linalg.norm(hessenberg[: j + 2, j]))
            if column_norm == 0.0:
                iterations += 1
                break

            for i in range(j):
                upper = cosines[i] * hessenberg[i, j] + sines[i] * hessenberg[i + 1, j]
                lower = -sines[i] * hessenberg[i, j] + cosines[i] * hessenberg[i + 1, j]
                hessenberg[i, j], hessenberg[i + 1, j] = upper, lower
            subdiagonal = hessenberg[j + 1, j]
            cosines[j], sines[j] = _givens(hessenberg[j, j], subdiagonal)
            hessenberg[j, j] = cosines[j] * hessenberg[j, j] + sines[j] * subdiagonal
            hessenberg[j + 1, j] = 0.0
            g[j + 1] = -sines[j] * g[j]
            g[j] = cosines[j] * g[j]

            used = j + 1
            iterations += 1
            logger.debug(f"FGMRES 反復 {iterations}: 残差推定 {abs(g[j + 1]):.3e}")
            if abs(g[j + 1]) <= target or subdiagonal <= 1e-14 * column_norm:
                break
            basis[j + 1] = w / subdiagonal

        if used:
            coefficients = la.solve_triangular(hessenberg[:used, :used], g[:used])
            x = x + coefficients @ directions[:used]
        residual = rhs - op(x)
        beta = norm(residual)
        if beta <= target:
            return x, iterations

    raise KrylovError(
        f"FGMRES が {config.max_iterations} 反復以内に収束しませんでした (残差 {beta:.3e})",
        iterations=iterations,
        residual_norm=beta,
        rhs_norm=rhs_norm,
        solution=x,
    )
