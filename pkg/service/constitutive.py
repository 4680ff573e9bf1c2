from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from service.exceptions import ConstitutiveDomainError

FloatArray = NDArray[np.float64]


@dataclass(frozen=True)
class ModelParams:
    """(p, δ) 応力則のパラメータ"""

    p: float
    delta: float
    nu: float
    nu_inf: float = 0.0

    def __post_init__(self) -> None:
        if not 1.0 < self.p <= 2.0:
            raise ValueError(f"p は 1 < p <= 2 の範囲で指定してください: {self.p}")
        if self.delta < 0.0:
            raise ValueError(f"delta は 0 以上で指定してください: {self.delta}")
        if self.nu <= 0.0:
            raise ValueError(f"nu は正の値で指定してください: {self.nu}")
        if self.nu_inf < 0.0:
            raise ValueError(f"nu_inf は 0 以上で指定してください: {self.nu_inf}")


@dataclass(frozen=True)
class SymTensor2:
    """2×2 対称テンソル (成分 a11, a22, a12)"""

    a11: float
    a22: float
    a12: float

    @classmethod
    def from_array(cls, values: FloatArray) -> "SymTensor2":
        return cls(float(values[0]), float(values[1]), float(values[2]))

    @classmethod
    def zero(cls) -> "SymTensor2":
        return cls(0.0, 0.0, 0.0)

    def as_array(self) -> FloatArray:
        return np.array([self.a11, self.a22, self.a12], dtype=np.float64)

    def ddot(self, other: "SymTensor2") -> float:
        return self.a11 * other.a11 + self.a22 * other.a22 + 2.0 * self.a12 * other.a12

    def norm2(self) -> float:
        return self.ddot(self)

    def norm(self) -> float:
        return float(np.sqrt(self.norm2()))

    def __add__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2(self.a11 + other.a11, self.a22 + other.a22, self.a12 + other.a12)

    def __sub__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2(self.a11 - other.a11, self.a22 - other.a22, self.a12 - other.a12)

    def __mul__(self, factor: float) -> "SymTensor2":
        return SymTensor2(factor * self.a11, factor * self.a22, factor * self.a12)

    __rmul__ = __mul__


class TangentKind(StrEnum):
    PIC = "pic"
    EXN = "exn"
    MODN = "modn"


@dataclass(frozen=True)
class TangentVariant:
    """
    線形化の種類

    sigma_max は MODN のみ有効。None のときは ν を上限に使う。
    """

    kind: TangentKind
    sigma_max: float | None = None

    def __post_init__(self) -> None:
        if self.sigma_max is not None and self.sigma_max < 0.0:
            raise ValueError(f"sigma_max は 0 以上で指定してください: {self.sigma_max}")

    def clip_bound(self, params: ModelParams) -> float:
        return params.nu if self.sigma_max is None else self.sigma_max


@dataclass(frozen=True)
class TangentEval:
    eta: float
    mu: float
    lambda_perp: float
    lambda_par: float
    ratio: float
    s: float


def frobenius_dot(a: FloatArray, b: FloatArray) -> FloatArray:
    """成分表現 (..., 3) どうしのフロベニウス内積"""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + 2.0 * a[..., 2] * b[..., 2]


def _require_positive_delta(params: ModelParams) -> None:
    if params.delta <= 0.0:
        raise ConstitutiveDomainError(
            f"応力の微分には delta > 0 が必要です: delta={params.delta}"
        )


def power_part(params: ModelParams, a: FloatArray) -> FloatArray:
    """μ = ν(δ²+|A|²)^((p-2)/2)"""
    norm2 = frobenius_dot(a, a)
    if params.delta == 0.0 and params.p < 2.0 and np.any(norm2 == 0.0):
        raise ConstitutiveDomainError("delta = 0 かつ A = 0 では粘性が定義できません")
    return params.nu * (params.delta**2 + norm2) ** ((params.p - 2.0) / 2.0)


def viscosity_field(params: ModelParams, a: FloatArray) -> FloatArray:
    return params.nu_inf + power_part(params, a)


def stress_field(params: ModelParams, a: FloatArray) -> FloatArray:
    """S(A) = η(A)A。delta = 0 の A = 0 では極限値 0 を返す"""
    if params.delta == 0.0:
        norm2 = frobenius_dot(a, a)
        safe = np.where(norm2 > 0.0, norm2, 1.0)
        mu = np.where(norm2 > 0.0, params.nu * safe ** ((params.p - 2.0) / 2.0), 0.0)
        return (params.nu_inf + mu)[..., None] * a
    return viscosity_field(params, a)[..., None] * a


def tangent_coefficients(
    variant: TangentVariant, params: ModelParams, a: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """
    接線 T(B) = ηB + κ(A:B)A の係数 (η, κ) を返す

    Args:
        variant: 線形化の種類
        params: 応力則パラメータ
        a: 現在の反復値の対称勾配 (..., 3)

    Returns:
        (eta, kappa) の組。形状は a.shape[:-1]

    Raises:
        ConstitutiveDomainError: delta = 0
    """
    _require_positive_delta(params)
    norm2 = frobenius_dot(a, a)
    big_delta2 = params.delta**2 + norm2
    mu = params.nu * big_delta2 ** ((params.p - 2.0) / 2.0)
    eta = params.nu_inf + mu
    if variant.kind == TangentKind.PIC:
        return eta, np.zeros_like(eta)
    kappa = (params.p - 2.0) * mu / big_delta2
    if variant.kind == TangentKind.EXN:
        return eta, kappa
    return eta, clip_factor(variant, params, mu * np.sqrt(norm2)) * kappa


def clip_factor(variant: TangentVariant, params: ModelParams, sigma_norm: FloatArray) -> FloatArray:
    """s = min(1, σ_max/|σ|)、|σ| = 0 では 0"""
    bound = variant.clip_bound(params)
    sigma_norm = np.asarray(sigma_norm, dtype=np.float64)
    ratio = np.divide(bound, sigma_norm, out=np.zeros_like(sigma_norm), where=sigma_norm > 0.0)
    return np.where(sigma_norm > 0.0, np.minimum(1.0, ratio), 0.0)


def apply_tangent_field(eta: FloatArray, kappa: FloatArray, a: FloatArray, b: FloatArray) -> FloatArray:
    return eta[..., None] * b + (kappa * frobenius_dot(a, b))[..., None] * a


def stress_derivative_field(params: ModelParams, a: FloatArray, h: FloatArray) -> FloatArray:
    eta, kappa = tangent_coefficients(TangentVariant(TangentKind.EXN), params, a)
    return apply_tangent_field(eta, kappa, a, h)


def natural_distance_field(params: ModelParams, a: FloatArray) -> FloatArray:
    """Φδ(A) = (δ²+|A|²)^((p-2)/4) A"""
    base = params.delta**2 + frobenius_dot(a, a)
    safe = np.where(base > 0.0, base, 1.0)
    factor = np.where(base > 0.0, safe ** ((params.p - 2.0) / 4.0), 0.0)
    return factor[..., None] * a


def effective_viscosity(params: ModelParams, a: SymTensor2) -> float:
    return float(viscosity_field(params, a.as_array()))


def stress(params: ModelParams, a: SymTensor2) -> SymTensor2:
    return SymTensor2.from_array(stress_field(params, a.as_array()))


def stress_derivative_apply(params: ModelParams, a: SymTensor2, h: SymTensor2) -> SymTensor2:
    return SymTensor2.from_array(stress_derivative_field(params, a.as_array(), h.as_array()))


def tangent_apply(
    variant: TangentVariant, params: ModelParams, a: SymTensor2, b: SymTensor2
) -> SymTensor2:
    a_arr = a.as_array()
    eta, kappa = tangent_coefficients(variant, params, a_arr)
    return SymTensor2.from_array(apply_tangent_field(eta, kappa, a_arr, b.as_array()))


def tangent_spectrum(variant: TangentVariant, params: ModelParams, a: SymTensor2) -> TangentEval:
    """接線の固有値 λ⊥ (A に直交する方向) と λ∥ (A 方向)"""
    a_arr = a.as_array()
    eta, kappa = tangent_coefficients(variant, params, a_arr)
    norm2 = a.norm2()
    mu = float(power_part(params, a_arr))
    lambda_perp = float(eta)
    lambda_par = lambda_perp + float(kappa) * norm2
    if variant.kind == TangentKind.PIC:
        s = 0.0
    elif variant.kind == TangentKind.EXN:
        s = 1.0
    else:
        s = float(clip_factor(variant, params, np.array(mu * np.sqrt(norm2))))
    return TangentEval(
        eta=lambda_perp,
        mu=mu,
        lambda_perp=lambda_perp,
        lambda_par=lambda_par,
        ratio=lambda_perp / lambda_par,
        s=s,
    )


def natural_distance_map(params: ModelParams, a: SymTensor2) -> SymTensor2:
    return SymTensor2.from_array(natural_distance_field(params, a.as_array()))


def apparent_viscosity(params: ModelParams, shear_rate: float) -> float:
    """スカラーせん断速度に対する見かけ粘度"""
    return params.nu_inf + params.nu * (params.delta**2 + shear_rate**2) ** ((params.p - 2.0) / 2.0)
