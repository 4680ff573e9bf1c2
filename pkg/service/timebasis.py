from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre

from service.constitutive import FloatArray

MAX_DEGREE = 6
DEFECT_FLOOR = 1e-14
REFERENCE_POINTS = 24


@dataclass(frozen=True)
class TemporalBasis:
    """参照区間 (0,1] 上の右側 Gauss-Radau 節点と重み"""

    k: int
    nodes: FloatArray
    weights: FloatArray


@dataclass(frozen=True)
class TemporalMatrices:
    M_t: FloatArray
    K_t: FloatArray
    m_t: FloatArray


@dataclass(frozen=True)
class TimePartition:
    t: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("時間分割には 2 点以上が必要です")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("時刻列は狭義単調増加である必要があります")
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, end_time: float, steps: int, start_time: float = 0.0) -> "TimePartition":
        if steps < 1:
            raise ValueError(f"ステップ数は 1 以上で指定してください: {steps}")
        return cls(np.linspace(start_time, end_time, steps + 1))

    @property
    def num_steps(self) -> int:
        return self.t.size - 1

    @property
    def taus(self) -> FloatArray:
        return np.diff(self.t)

    @property
    def tau(self) -> float:
        return float(self.taus.max())

    def interval(self, n: int) -> tuple[float, float]:
        """n 番目 (1 始まり) の区間 (t_{n-1}, t_n]"""
        return float(self.t[n - 1]), float(self.t[n])


def _radau_nodes(k: int) -> FloatArray:
    """右側 Radau 多項式 P_{k+1} - P_k の根を [-1,1] 上で求める"""
    if k == 0:
        return np.array([1.0])
    coeffs = np.zeros(k + 2)
    coeffs[k] = -1.0
    coeffs[k + 1] = 1.0
    roots = np.sort(np.real(legendre.legroots(coeffs)))
    derivative = legendre.legder(coeffs)
    # 端点以外を Newton 法で倍精度まで仕上げる
    interior = roots[:-1]
    for _ in range(3):
        interior = interior - legendre.legval(interior, coeffs) / legendre.legval(interior, derivative)
    return np.concatenate([interior, [1.0]])


def gauss_radau(k: int) -> TemporalBasis:
    """
    右側 (k+1) 点 Gauss-Radau 則を構成

    Args:
        k: 時間方向の多項式次数 (0 <= k <= 6)

    Returns:
        (0,1] 上の節点と正の重み

    Raises:
        ValueError: 次数が範囲外
    """
    if not 0 <= k <= MAX_DEGREE:
        raise ValueError(f"時間次数 k は 0 から {MAX_DEGREE} の範囲で指定してください: {k}")

    nodes = 0.5 * (_radau_nodes(k) + 1.0)
    nodes[-1] = 1.0
    points, gauss_weights = legendre.leggauss(k + 2)
    points = 0.5 * (points + 1.0)
    values = _lagrange_table(nodes, points)
    weights = 0.5 * values @ gauss_weights
    return TemporalBasis(k=k, nodes=nodes, weights=weights)


def _lagrange_table(nodes: FloatArray, points: FloatArray) -> FloatArray:
    """ℓ_μ(points) を (k+1, npts) で返す"""
    points = np.atleast_1d(np.asarray(points, dtype=np.float64))
    table = np.ones((nodes.size, points.size))
    for mu in range(nodes.size):
        for nu in range(nodes.size):
            if nu != mu:
                table[mu] *= (points - nodes[nu]) / (nodes[mu] - nodes[nu])
    return table


def _lagrange_derivative_table(nodes: FloatArray, points: FloatArray) -> FloatArray:
    points = np.atleast_1d(np.asarray(points, dtype=np.float64))
    table = np.zeros((nodes.size, points.size))
    for mu in range(nodes.size):
        for skip in range(nodes.size):
            if skip == mu:
                continue
            term = np.full(points.size, 1.0 / (nodes[mu] - nodes[skip]))
            for nu in range(nodes.size):
                if nu != mu and nu != skip:
                    term *= (points - nodes[nu]) / (nodes[mu] - nodes[nu])
            table[mu] += term
    return table


def lagrange_values(basis: TemporalBasis, points: FloatArray | float) -> FloatArray:
    return _lagrange_table(basis.nodes, np.asarray(points, dtype=np.float64))


def lagrange_eval(basis: TemporalBasis, mu: int, that: float) -> float:
    if not 0 <= mu <= basis.k:
        raise ValueError(f"節点番号が範囲外です: {mu}")
    return float(_lagrange_table(basis.nodes, np.array([that]))[mu, 0])


def temporal_matrices(basis: TemporalBasis) -> TemporalMatrices:
    """M_t, K_t, m_t を Gauss-Legendre 積分で厳密に計算"""
    points, gauss_weights = legendre.leggauss(basis.k + 2)
    points = 0.5 * (points + 1.0)
    gauss_weights = 0.5 * gauss_weights
    values = _lagrange_table(basis.nodes, points)
    derivatives = _lagrange_derivative_table(basis.nodes, points)
    at_zero = _lagrange_table(basis.nodes, np.array([0.0]))[:, 0]

    mass = (values * gauss_weights) @ values.T
    stiffness = (values * gauss_weights) @ derivatives.T + np.outer(at_zero, at_zero)
    return TemporalMatrices(M_t=mass, K_t=stiffness, m_t=at_zero)


@dataclass(frozen=True)
class QuadratureOrderReport:
    order: float | None
    exact: bool
    taus: tuple[float, ...]
    defects: tuple[float, ...]


def quadrature_defect_order(
    k: int,
    f: Callable[[FloatArray], FloatArray],
    tau_list: Sequence[float],
) -> QuadratureOrderReport:
    """
    ∫_0^τ f と Gauss-Radau 近似との差の観測次数を返す

    欠損が下限 1e-14 を下回る点は傾きの推定から除き、残りが 2 点未満なら exact とする。
    """
    if len(tau_list) < 3:
        raise ValueError("tau_list には 3 点以上が必要です")

    basis = gauss_radau(k)
    points, gauss_weights = legendre.leggauss(REFERENCE_POINTS)
    points = 0.5 * (points + 1.0)
    gauss_weights = 0.5 * gauss_weights

    defects = []
    for tau in tau_list:
        reference = tau * float(np.dot(gauss_weights, f(tau * points)))
        radau = tau * float(np.dot(basis.weights, f(tau * basis.nodes)))
        defects.append(abs(reference - radau))

    taus = np.asarray(tau_list, dtype=np.float64)
    values = np.asarray(defects)
    usable = values > DEFECT_FLOOR
    if usable.sum() < 2:
        return QuadratureOrderReport(None, True, tuple(taus), tuple(defects))
    slope = np.polyfit(np.log(taus[usable]), np.log(values[usable]), 1)[0]
    return QuadratureOrderReport(float(slope), False, tuple(taus), tuple(defects))
