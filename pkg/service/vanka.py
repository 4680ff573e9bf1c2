import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from service.constitutive import FloatArray, TangentVariant
from service.exceptions import SingularPatchError
from service.femspace import MixedSpace
from service.forms import SpatialState
from service.mesh import IntArray
from service.slab import SlabContext, assemble_slab_matrix
from service.timebasis import lagrange_values

logger = logging.getLogger(__name__)

NODE_MATCH_TOLERANCE = 1e-14


@dataclass(frozen=True)
class PatchSet:
    """
    セルごとの Vanka パッチ

    indices は (セル数, (k+1)*21)。inverses は局所行列の逆行列を一括で持つ。
    weights は各パッチ成分の 1/(その自由度を含むパッチ数) で、全パッチの和は 1 になる。
    """

    level: int
    indices: IntArray
    matrices: FloatArray
    inverses: FloatArray
    weights: FloatArray

    @property
    def num_patches(self) -> int:
        return self.indices.shape[0]

    @property
    def patch_size(self) -> int:
        return self.indices.shape[1]


def patch_indices(space: MixedSpace, num_nodes: int) -> IntArray:
    """セルの速度 18 と圧力 3 の自由度を全時間節点について並べる"""
    spatial = space.size
    offsets = spatial * np.arange(num_nodes)
    return (offsets[None, :, None] + space.cell_dofs[:, None, :]).reshape(space.mesh.num_cells, -1)


def partition_weights(indices: IntArray, size: int) -> FloatArray:
    """各パッチ成分に、その自由度を含むパッチ数の逆数を割り当てる (頂点の速度は 4 パッチで共有)"""
    multiplicity = np.bincount(indices.ravel(), minlength=size)
    return 1.0 / multiplicity[indices]


def extract_patches(matrix: sp.spmatrix, indices: IntArray) -> FloatArray:
    """R_K A R_Kᵀ を全パッチについて密行列で取り出す"""
    csr = sp.csr_matrix(matrix)
    return np.stack([csr[index][:, index].toarray() for index in indices])


def _invert(matrices: FloatArray, level: int) -> FloatArray:
    size = matrices.shape[1]
    identity = np.broadcast_to(np.eye(size), matrices.shape)
    try:
        return np.linalg.solve(matrices, identity)
    except np.linalg.LinAlgError:
        for cell, local in enumerate(matrices):
            try:
                np.linalg.solve(local, np.eye(size))
            except np.linalg.LinAlgError as e:
                raise SingularPatchError(
                    f"レベル {level} のセル {cell} のパッチ行列が特異です",
                    level=level,
                    cell=cell,
                ) from e
        raise


def build_patches(matrix: sp.spmatrix, indices: IntArray, level: int = 0) -> PatchSet:
    """
    演算子行列からパッチ行列を取り出して逆行列を作る

    Raises:
        SingularPatchError: 特異なパッチがある
    """
    matrices = extract_patches(matrix, indices)
    inverses = _invert(matrices, level)
    logger.debug(f"レベル {level}: パッチ {len(indices)} 個を構築しました (サイズ {indices.shape[1]})")
    weights = partition_weights(indices, matrix.shape[0])
    return PatchSet(level=level, indices=indices, matrices=matrices, inverses=inverses, weights=weights)


def representative_state(ctx: SlabContext, U: FloatArray, rep_point: float) -> SpatialState:
    """参照時刻 rep_point での Lagrange 補間状態。節点と一致するときはその節点の状態"""
    nodes = ctx.basis.nodes
    matches = np.flatnonzero(np.abs(nodes - rep_point) <= NODE_MATCH_TOLERANCE)
    if matches.size:
        mu = int(matches[0])
        return ctx.layout.node_state(U, mu, float(ctx.node_times[mu]))
    weights = lagrange_values(ctx.basis, np.array([rep_point]))[:, 0]
    blocks = weights @ ctx.layout.blocks(U)
    t = ctx.interval[0] + ctx.tau * rep_point
    return SpatialState(v=blocks[: ctx.layout.M_v], pi=blocks[ctx.layout.M_v:], t=t)


def surrogate_matrix(
    ctx: SlabContext,
    U: FloatArray,
    variant: TangentVariant,
    rep_point: float = 0.5,
) -> sp.csr_matrix:
    """全節点の J_μ を代表時刻の J_rep で置き換えたスラブ行列"""
    state = representative_state(ctx, U, rep_point)
    block = ctx.operator.linearize(state, variant).assemble()
    return assemble_slab_matrix(ctx, [block] * ctx.layout.num_nodes)


def build_surrogate_patches(
    ctx: SlabContext,
    U: FloatArray,
    variant: TangentVariant,
    indices: IntArray,
    rep_point: float = 0.5,
    level: int = 0,
) -> PatchSet:
    return build_patches(surrogate_matrix(ctx, U, variant, rep_point), indices, level)


def vanka_smooth(
    matrix: sp.spmatrix,
    patches: PatchSet,
    d: FloatArray,
    r: FloatArray,
    steps: int,
    omega: float,
) -> FloatArray:
    """
    加法的 Vanka 平滑化 d ← d + ω Σ_K R_Kᵀ D_K A_K⁻¹ R_K (r − A d)

    D_K は patches.weights の対角行列 (Σ_K R_Kᵀ D_K R_K = I)。

    Args:
        matrix: レベル演算子
        patches: パッチと局所逆行列
        d: 現在の近似
        r: 右辺
        steps: 平滑化回数
        omega: 減衰係数 (0 <= omega <= 1)

    Returns:
        更新後の近似
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega は 0 から 1 の範囲で指定してください: {omega}")
    d = d.copy()
    if omega == 0.0:
        return d
    for _ in range(steps):
        defect = r - matrix @ d
        local = patches.weights * np.einsum("kpq,kq->kp", patches.inverses, defect[patches.indices])
        d += omega * np.bincount(patches.indices.ravel(), weights=local.ravel(), minlength=d.size)
    return d


@dataclass(frozen=True)
class PatchPerturbation:
    cell: int
    error_norm: float
    epsilon: float
    spectral_deviation: float
    within_disk: bool
    inverse_bound: bool
    singular_bracket: bool


def patch_perturbation_report(exact: PatchSet, surrogate: PatchSet) -> list[PatchPerturbation]:
    """
    代理パッチ Ã = A + E の摂動量と前処理付きスペクトルを調べる

    ε = ‖A⁻¹E‖₂ < 1 のとき A⁻¹Ã の固有値が |z−1| <= ε にあるか、
    ‖Ã⁻¹‖ <= ‖A⁻¹‖/(1−ε) と特異値の範囲が成り立つかを記録する。
    厳密パッチが特異なものは飛ばす。
    """
    if exact.indices.shape != surrogate.indices.shape or not np.array_equal(exact.indices, surrogate.indices):
        raise ValueError("厳密パッチと代理パッチの自由度集合が一致しません")

    report: list[PatchPerturbation] = []
    for cell, (matrix, approx) in enumerate(zip(exact.matrices, surrogate.matrices)):
        singular_values = la.svdvals(matrix)
        if singular_values[-1] <= 1e-14 * singular_values[0]:
            logger.warning(f"セル {cell} の厳密パッチが特異のため摂動評価を省略します")
            continue
        error = approx - matrix
        scaled = la.solve(matrix, error)
        epsilon = float(np.linalg.norm(scaled, 2))
        eigenvalues = la.eigvals(la.solve(matrix, approx))
        deviation = float(np.max(np.abs(eigenvalues - 1.0)))

        within = inverse_ok = bracket_ok = True
        if epsilon < 1.0:
            tolerance = 1e-10
            within = deviation <= epsilon + tolerance
            approx_values = la.svdvals(approx)
            inverse_ok = 1.0 / approx_values[-1] <= (1.0 / singular_values[-1]) / (1.0 - epsilon) * (1 + tolerance)
            bracket_ok = (
                approx_values[-1] >= singular_values[-1] * (1.0 - epsilon) * (1 - tolerance)
                and approx_values[0] <= singular_values[0] * (1.0 + epsilon) * (1 + tolerance)
            )
            if not (within and inverse_ok and bracket_ok):
                logger.warning(f"セル {cell} で摂動の上界が成り立ちません (ε={epsilon:.3e})")

        report.append(PatchPerturbation(
            cell=cell,
            error_norm=float(np.linalg.norm(error, 2)),
            epsilon=epsilon,
            spectral_deviation=deviation,
            within_disk=within,
            inverse_bound=inverse_ok,
            singular_bracket=bracket_ok,
        ))
    return report
