import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre

from service.constitutive import (
    FloatArray,
    ModelParams,
    apparent_viscosity,
    frobenius_dot,
    natural_distance_field,
    stress_field,
)
from service.femspace import MixedSpace, q2_reference, spatial_quadrature
from service.manufactured import ManufacturedCase
from service.newton import SolveStats
from service.slab import Trajectory
from service.timebasis import lagrange_values


@dataclass(frozen=True)
class ErrorNorms:
    e_phi: float
    e_div: float


def _components(matrix: FloatArray) -> FloatArray:
    return np.stack([matrix[..., 0, 0], matrix[..., 1, 1], matrix[..., 0, 1]], axis=-1)


@dataclass(frozen=True)
class _Tables:
    gradients: FloatArray
    weights: FloatArray
    x: FloatArray
    y: FloatArray


def _error_tables(space: MixedSpace) -> _Tables:
    """誤差評価用の q+1 点空間積分則"""
    quadrature = spatial_quadrature(space.quadrature_order + 1)
    _, gradients = q2_reference(quadrature.points[:, 0], quadrature.points[:, 1])
    x0, y0 = space.mesh.cell_origins
    return _Tables(
        gradients=space.physical_gradients(gradients),
        weights=quadrature.weights * space.cell_measure,
        x=x0[:, None] + space.mesh.hx * quadrature.points[None, :, 0],
        y=y0[:, None] + space.mesh.hy * quadrature.points[None, :, 1],
    )


def error_norms(trajectory: Trajectory, case: ManufacturedCase) -> ErrorNorms:
    """
    L²(L²) 誤差 ‖Φδ(Dv) - Φδ(Dv_h)‖ と ‖div v_h‖

    各スラブで (k+2) 点 Gauss、空間は q+1 点の積分則を使う。

    Args:
        trajectory: 全スラブの離散解
        case: 解析解

    Returns:
        (e_phi, e_div)
    """
    params = case.params
    operator = trajectory.contexts[0].operator
    space = operator.space
    tables = _error_tables(space)
    basis = trajectory.basis
    points, gauss_weights = legendre.leggauss(basis.k + 2)
    points = 0.5 * (points + 1.0)
    gauss_weights = 0.5 * gauss_weights
    interpolation = lagrange_values(basis, points)
    cell_dofs = space.velocity.cell_dofs

    phi_sum = 0.0
    div_sum = 0.0
    for ctx, U in zip(trajectory.contexts, trajectory.slabs):
        velocity = ctx.layout.velocity(U)
        for g, (point, weight) in enumerate(zip(points, gauss_weights)):
            t = ctx.interval[0] + ctx.tau * point
            v = interpolation[:, g] @ velocity
            grad = np.einsum("qaj,cia->cqij", tables.gradients, v[cell_dofs].reshape(-1, 2, 9))
            strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
            exact = case.strain(tables.x, tables.y, t)
            difference = (
                natural_distance_field(params, _components(exact))
                - natural_distance_field(params, _components(strain))
            )
            difference_norm2 = frobenius_dot(difference, difference)
            divergence = grad[..., 0, 0] + grad[..., 1, 1]
            phi_sum += ctx.tau * weight * float(np.einsum("q,cq->", tables.weights, difference_norm2))
            div_sum += ctx.tau * weight * float(np.einsum("q,cq->", tables.weights, divergence**2))
    return ErrorNorms(e_phi=math.sqrt(phi_sum), e_div=math.sqrt(div_sum))


def eoc(errors: Sequence[float]) -> list[float | None]:
    """連続するレベル間の log2(e_i / e_{i+1})。0 を含むと None"""
    if len(errors) < 2:
        raise ValueError("eoc には 2 レベル以上の誤差が必要です")
    rates: list[float | None] = []
    for coarse, fine in zip(errors[:-1], errors[1:]):
        if coarse <= 0.0 or fine <= 0.0:
            rates.append(None)
        else:
            rates.append(math.log2(coarse / fine))
    return rates


def work(stats: Iterable[SolveStats], n_dof: int) -> int:
    """W = (Σ_n Σ_m n_L(n, m)) · N_dof"""
    return sum(slab.n_l_total for slab in stats) * n_dof


def slab_dof_count(space: MixedSpace, k: int) -> int:
    return (k + 1) * space.size


def apparent_reynolds(params: ModelParams, velocity_scale: float, length_scale: float) -> float:
    """Re = UL / η_app(U/L)"""
    if velocity_scale <= 0.0 or length_scale <= 0.0:
        raise ValueError(
            f"速度スケールと長さスケールは正の値が必要です: U={velocity_scale}, L={length_scale}"
        )
    shear_rate = velocity_scale / length_scale
    return velocity_scale * length_scale / apparent_viscosity(params, shear_rate)


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    kinetic: float
    dissipation: float


def energy(trajectory: Trajectory) -> list[EnergyRecord]:
    """
    スラブ終端の運動エネルギー ½‖v_h(t_n)‖² と各スラブの散逸 ∫(S(Dv_h), Dv_h)

    散逸は Gauss-Radau 則で時間積分する。
    """
    operator = trajectory.contexts[0].operator
    space = operator.space
    params = operator.params
    mass = space.velocity_mass
    records = []
    for ctx, U in zip(trajectory.contexts, trajectory.slabs):
        velocity = ctx.layout.velocity(U)
        dissipation = 0.0
        for weight, v in zip(ctx.node_weights, velocity):
            local = v[space.velocity.cell_dofs].reshape(-1, 2, 9)
            grad = np.einsum("qaj,cia->cqij", space.volume_gradients, local)
            strain = _components(0.5 * (grad + np.swapaxes(grad, -1, -2)))
            stress = stress_field(params, strain)
            power = frobenius_dot(stress, strain)
            dissipation += weight * float(np.einsum("q,cq->", space.volume_weights, power))
        final = velocity[-1]
        records.append(EnergyRecord(
            t=ctx.interval[1],
            kinetic=0.5 * float(final @ (mass @ final)),
            dissipation=dissipation,
        ))
    return records
