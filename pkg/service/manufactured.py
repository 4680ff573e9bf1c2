from dataclasses import dataclass

import numpy as np

from service.constitutive import FloatArray, ModelParams
from service.femspace import MixedSpace, interpolate
from service.forms import ProblemData


def _a(x: FloatArray) -> FloatArray:
    return np.sin(np.pi * x) ** 2


def _a1(x: FloatArray) -> FloatArray:
    return np.pi * np.sin(2.0 * np.pi * x)


def _a2(x: FloatArray) -> FloatArray:
    return 2.0 * np.pi**2 * np.cos(2.0 * np.pi * x)


def _b(x: FloatArray) -> FloatArray:
    return 0.5 * np.sin(2.0 * np.pi * x)


def _b1(x: FloatArray) -> FloatArray:
    return np.pi * np.cos(2.0 * np.pi * x)


def _b2(x: FloatArray) -> FloatArray:
    return -2.0 * np.pi**2 * np.sin(2.0 * np.pi * x)


@dataclass(frozen=True)
class ManufacturedCase:
    """
    単位正方形上の解析解

    v = sin(t) (a(x)b(y), -b(x)a(y))、π = sin(t) b(x)b(y)
    (a = sin²(πx), b = sin(2πx)/2)。速度は各点で発散 0、境界で 0。
    """

    params: ModelParams
    convection: bool = True

    def velocity(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        s = np.sin(t)
        return np.stack([s * _a(x) * _b(y), -s * _b(x) * _a(y)])

    def pressure(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        return np.sin(t) * _b(x) * _b(y)

    def velocity_gradient(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        """[..., i, j] = ∂_j v_i"""
        s = np.sin(t)
        grad = np.empty(np.shape(x) + (2, 2))
        grad[..., 0, 0] = s * _a1(x) * _b(y)
        grad[..., 0, 1] = s * _a(x) * _b1(y)
        grad[..., 1, 0] = -s * _b1(x) * _a(y)
        grad[..., 1, 1] = -s * _b(x) * _a1(y)
        return grad

    def velocity_hessian(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        """[..., i, j, k] = ∂_k ∂_j v_i"""
        s = np.sin(t)
        hess = np.empty(np.shape(x) + (2, 2, 2))
        hess[..., 0, 0, 0] = s * _a2(x) * _b(y)
        hess[..., 0, 0, 1] = s * _a1(x) * _b1(y)
        hess[..., 0, 1, 0] = hess[..., 0, 0, 1]
        hess[..., 0, 1, 1] = s * _a(x) * _b2(y)
        hess[..., 1, 0, 0] = -s * _b2(x) * _a(y)
        hess[..., 1, 0, 1] = -s * _b1(x) * _a1(y)
        hess[..., 1, 1, 0] = hess[..., 1, 0, 1]
        hess[..., 1, 1, 1] = -s * _b(x) * _a2(y)
        return hess

    def strain(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        grad = self.velocity_gradient(x, y, t)
        return 0.5 * (grad + np.swapaxes(grad, -1, -2))

    def divergence(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        grad = self.velocity_gradient(x, y, t)
        return grad[..., 0, 0] + grad[..., 1, 1]

    def forcing(self, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        return manufactured_forcing(self, x, y, t)

    def problem_data(self) -> ProblemData:
        def initial_velocity(x: FloatArray, y: FloatArray) -> FloatArray:
            return self.velocity(x, y, 0.0)
        return ProblemData(forcing=self.forcing, initial_velocity=initial_velocity)


def manufactured_forcing(case: ManufacturedCase, x: FloatArray, y: FloatArray, t: float) -> FloatArray:
    """
    f = ∂_t v + div(v⊗v) - div S(Dv) + ∇π を閉じた形の微分で評価

    Args:
        case: 解析解
        x, y: 評価点 (同じ形状)
        t: 時刻

    Returns:
        (2, ...) の外力
    """
    params = case.params
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cos_t = np.cos(t)
    s = np.sin(t)

    velocity = np.moveaxis(case.velocity(x, y, t), 0, -1)
    grad = case.velocity_gradient(x, y, t)
    hess = case.velocity_hessian(x, y, t)
    strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    strain_derivative = 0.5 * (hess + np.swapaxes(hess, -2, -3))

    norm2 = np.einsum("...ij,...ij->...", strain, strain)
    base = params.delta**2 + norm2
    eta = params.nu_inf + params.nu * base ** ((params.p - 2.0) / 2.0)
    eta_factor = params.nu * (params.p - 2.0) * base ** ((params.p - 4.0) / 2.0)
    eta_gradient = eta_factor[..., None] * np.einsum("...lm,...lmj->...j", strain, strain_derivative)

    stress_divergence = (
        eta[..., None] * np.einsum("...ijj->...i", strain_derivative)
        + np.einsum("...ij,...j->...i", strain, eta_gradient)
    )
    time_derivative = np.stack([cos_t * _a(x) * _b(y), -cos_t * _b(x) * _a(y)], axis=-1)
    pressure_gradient = np.stack([s * _b1(x) * _b(y), s * _b(x) * _b1(y)], axis=-1)

    force = time_derivative - stress_divergence + pressure_gradient
    if case.convection:
        force += np.einsum("...ij,...j->...i", grad, velocity)
    return np.moveaxis(force, -1, 0)


def interpolate_state(case: ManufacturedCase, space: MixedSpace, t: float) -> FloatArray:
    """時刻 t の解析解を速度は節点補間、圧力は L² 射影で離散化した混合ベクトル"""
    return np.concatenate([
        interpolate(space.velocity, case.velocity, t),
        interpolate(space.pressure, case.pressure, t),
    ])
