import logging
from dataclasses import dataclass, field, replace
from enum import StrEnum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import SuperLU, splu

from service.constitutive import FloatArray, TangentVariant
from service.femspace import MixedSpace, quadratic_lagrange_1d
from service.forms import SpatialOperator
from service.mesh import IntArray, MeshHierarchy, build_hierarchy
from service.slab import SlabContext, SlabLinearization, normalize_pressure
from service.vanka import PatchSet, build_patches, build_surrogate_patches, patch_indices, vanka_smooth

logger = logging.getLogger(__name__)

CHILD_POINTS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


class CoarseMode(StrEnum):
    GALERKIN = "galerkin"
    REDISCRETIZE = "rediscretize"


@dataclass(frozen=True)
class MgConfig:
    """
    時空間マルチグリッドの設定

    coarse_cells は最粗メッシュの 1 方向セル数。surrogate は最細レベルの
    パッチを代表時刻 rep_point (参照区間上) の Jacobian で作るかどうか。
    """

    coarse_cells: int = 4
    pre_smooth: int = 2
    post_smooth: int = 2
    omega: float = 0.7
    surrogate: bool = True
    rep_point: float = 0.5
    coarse_mode: CoarseMode = CoarseMode.GALERKIN
    rebuild_ratio: float = 0.9
    rebuild_factor: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.omega <= 1.0:
            raise ValueError(f"omega は 0 < omega <= 1 で指定してください: {self.omega}")
        if self.coarse_cells < 1:
            raise ValueError(f"coarse_cells は 1 以上で指定してください: {self.coarse_cells}")
        if self.pre_smooth < 0 or self.post_smooth < 0:
            raise ValueError("平滑化回数は 0 以上で指定してください")
        if not 0.0 <= self.rep_point <= 1.0:
            raise ValueError(f"rep_point は [0, 1] で指定してください: {self.rep_point}")


def quadratic_prolongation_1d(coarse_cells: int) -> sp.csr_matrix:
    """1 次元 2 次要素の粗→細補間 (節点 2c..2c+2 → 細節点 4c..4c+4)"""
    dense = np.zeros((4 * coarse_cells + 1, 2 * coarse_cells + 1))
    values, _ = quadratic_lagrange_1d(CHILD_POINTS)
    for c in range(coarse_cells):
        dense[4 * c: 4 * c + 5, 2 * c: 2 * c + 3] = values.T
    return sp.csr_matrix(dense)


def velocity_prolongation(coarse: MixedSpace) -> sp.csr_matrix:
    """Q2 節点補間による埋め込み (成分ブロック対角)"""
    scalar = sp.kron(
        quadratic_prolongation_1d(coarse.mesh.ny),
        quadratic_prolongation_1d(coarse.mesh.nx),
        format="csr",
    )
    return sp.block_diag([scalar, scalar], format="csr")


def pressure_prolongation(coarse: MixedSpace, fine: MixedSpace, parents: IntArray) -> sp.csr_matrix:
    """P1disc の局所 L² 埋め込み。子セル (a, b) への制限は係数の一次変換"""
    i, j = fine.mesh.cell_ij
    shift_x = 0.5 * ((i % 2) - 0.5)
    shift_y = 0.5 * ((j % 2) - 0.5)
    fine_cells = np.arange(fine.mesh.num_cells)
    rows = np.concatenate([
        3 * fine_cells, 3 * fine_cells, 3 * fine_cells,
        3 * fine_cells + 1, 3 * fine_cells + 2,
    ])
    cols = np.concatenate([
        3 * parents, 3 * parents + 1, 3 * parents + 2,
        3 * parents + 1, 3 * parents + 2,
    ])
    data = np.concatenate([
        np.ones(fine_cells.size), shift_x, shift_y,
        np.full(fine_cells.size, 0.5), np.full(fine_cells.size, 0.5),
    ])
    return sp.csr_matrix((data, (rows, cols)), shape=(fine.M_p, coarse.M_p))


def spatial_prolongation(coarse: MixedSpace, fine: MixedSpace, parents: IntArray) -> sp.csr_matrix:
    return sp.block_diag(
        [velocity_prolongation(coarse), pressure_prolongation(coarse, fine, parents)], format="csr"
    )


def transfer_build(hierarchy: MeshHierarchy, spaces: list[MixedSpace], num_nodes: int) -> list[sp.csr_matrix]:
    """
    隣接レベル間のスラブ延長 I_{k+1}⊗blockdiag(P_v, P_p)

    戻り値の ℓ 番目はレベル ℓ からレベル ℓ+1 への延長。制限はその転置。
    """
    transfers = []
    for level, parents in enumerate(hierarchy.parents):
        spatial = spatial_prolongation(spaces[level], spaces[level + 1], parents)
        transfers.append(sp.kron(sp.identity(num_nodes, format="csr"), spatial, format="csr"))
    return transfers


def coarse_operator(fine_matrix: sp.spmatrix, prolongation: sp.spmatrix) -> sp.csr_matrix:
    """Galerkin 粗演算子 Pᵀ A P"""
    return (prolongation.T @ fine_matrix @ prolongation).tocsr()


def inject_velocity(coarse: MixedSpace, fine: MixedSpace, v: FloatArray) -> FloatArray:
    """粗節点 (I, J) に細節点 (2I, 2J) の値を入れる"""
    nodes_x = coarse.velocity.nodes_x
    coarse_nodes = np.arange(coarse.velocity.num_nodes)
    fine_nodes = 2 * (coarse_nodes // nodes_x) * fine.velocity.nodes_x + 2 * (coarse_nodes % nodes_x)
    components = v.reshape(2, -1)
    return components[:, fine_nodes].ravel()


def project_pressure(
    coarse: MixedSpace, fine: MixedSpace, parents: IntArray, pressure: FloatArray
) -> FloatArray:
    """細圧力の粗 P1disc への L² 射影"""
    embedding = pressure_prolongation(coarse, fine, parents)
    gram = (embedding.T @ fine.pressure_mass @ embedding).tocsc()
    return splu(gram).solve(embedding.T @ (fine.pressure_mass @ pressure))


@dataclass
class CoarseSolver:
    """
    最粗レベルの直接解法

    Neumann 境界がなければ各時間節点で 1 つの圧力定数自由度を固定する。
    """

    factor: SuperLU
    pinned: IntArray

    @classmethod
    def build(cls, matrix: sp.spmatrix, space: MixedSpace, num_nodes: int) -> "CoarseSolver":
        pinned = np.array([], dtype=np.int64)
        if not space.mesh.has_neumann:
            pinned = (space.size * np.arange(num_nodes) + space.M_v).astype(np.int64)
        pinned_matrix = sp.lil_matrix(matrix)
        for index in pinned:
            pinned_matrix[index, :] = 0.0
            pinned_matrix[:, index] = 0.0
            pinned_matrix[index, index] = 1.0
        return cls(factor=splu(pinned_matrix.tocsc()), pinned=pinned)

    def solve(self, rhs: FloatArray) -> FloatArray:
        rhs = rhs.copy()
        rhs[self.pinned] = 0.0
        return self.factor.solve(rhs)


@dataclass
class MgLevel:
    """マルチグリッドの 1 レベル"""

    index: int
    space: MixedSpace
    indices: IntArray
    matrix: sp.csr_matrix | None = None
    patches: PatchSet | None = None
    prolongation: sp.csr_matrix | None = None
    coarse_solver: CoarseSolver | None = field(default=None, repr=False)


def mg_vcycle(levels: list[MgLevel], rhs: FloatArray, config: MgConfig) -> FloatArray:
    """
    V サイクル 1 回。levels は粗→細の順で、最後が現在のレベル

    Args:
        levels: レベル列
        rhs: 現在レベルの右辺
        config: 平滑化回数と減衰係数

    Returns:
        補正ベクトル
    """
    level = levels[-1]
    if len(levels) == 1:
        if level.coarse_solver is None:
            raise RuntimeError("最粗レベルの直接解法が構築されていません")
        return level.coarse_solver.solve(rhs)
    if level.matrix is None or level.patches is None or level.prolongation is None:
        raise RuntimeError(f"レベル {level.index} が構築されていません")

    correction = np.zeros_like(rhs)
    if not np.any(rhs):
        return correction
    correction = vanka_smooth(level.matrix, level.patches, correction, rhs, config.pre_smooth, config.omega)
    defect = rhs - level.matrix @ correction
    coarse = mg_vcycle(levels[:-1], level.prolongation.T @ defect, config)
    correction += level.prolongation @ coarse
    return vanka_smooth(level.matrix, level.patches, correction, rhs, config.post_smooth, config.omega)


class SpaceTimeMultigrid:
    """
    1 スラブ分の前処理器。Newton 反復ごとに update で演算子を更新する

    パッチは最初の update か rebuild=True のときだけ作り直す。
    """

    def __init__(self, ctx: SlabContext, config: MgConfig):
        self.ctx = ctx
        self.config = config
        fine_space = ctx.operator.space
        self.hierarchy = build_hierarchy(fine_space.mesh, config.coarse_cells)
        spaces = [MixedSpace(mesh, fine_space.quadrature_order) for mesh in self.hierarchy.levels[:-1]]
        spaces.append(fine_space)
        num_nodes = ctx.layout.num_nodes
        transfers = transfer_build(self.hierarchy, spaces, num_nodes)
        self.levels = [
            MgLevel(
                index=index,
                space=space,
                indices=patch_indices(space, num_nodes),
                prolongation=None if index == 0 else transfers[index - 1],
            )
            for index, space in enumerate(spaces)
        ]
        self.rebuilds = 0

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def _coarse_context(self, level: MgLevel) -> SlabContext:
        fine = self.ctx.operator
        operator = SpatialOperator(level.space, fine.data, fine.params, replace(fine.config, lifting=None))
        return self.ctx.with_operator(operator, np.zeros(level.space.M_v))

    def _restrict_state(self, U: FloatArray) -> list[FloatArray]:
        """細レベルの状態を各レベルへ (速度は注入、圧力は L² 射影)"""
        states = [U]
        num_nodes = self.ctx.layout.num_nodes
        for coarse_index in range(self.num_levels - 2, -1, -1):
            coarse = self.levels[coarse_index].space
            fine = self.levels[coarse_index + 1].space
            parents = self.hierarchy.parents[coarse_index]
            blocks = states[0].reshape(num_nodes, fine.size)
            restricted = [
                np.concatenate([
                    inject_velocity(coarse, fine, block[: fine.M_v]),
                    project_pressure(coarse, fine, parents, block[fine.M_v:]),
                ])
                for block in blocks
            ]
            states.insert(0, np.concatenate(restricted))
        return states

    def update(
        self,
        U: FloatArray,
        variant: TangentVariant,
        linearization: SlabLinearization | None = None,
        rebuild: bool = False,
    ) -> None:
        """
        現在の Newton 状態で各レベルの演算子を組み直す

        Args:
            U: 現在の反復値
            variant: 線形化の種類
            linearization: 最細レベルの線形化 (None なら作る)
            rebuild: パッチを作り直すかどうか
        """
        finest = self.levels[-1]
        linearization = linearization or SlabLinearization(self.ctx, U, variant)
        finest.matrix = linearization.assemble()

        if self.config.coarse_mode == CoarseMode.GALERKIN:
            for index in range(self.num_levels - 1, 0, -1):
                upper = self.levels[index]
                assert upper.matrix is not None and upper.prolongation is not None
                self.levels[index - 1].matrix = coarse_operator(upper.matrix, upper.prolongation)
        else:
            states = self._restrict_state(U)
            for level in self.levels[:-1]:
                coarse_ctx = self._coarse_context(level)
                level.matrix = SlabLinearization(coarse_ctx, states[level.index], variant).assemble()

        coarsest = self.levels[0]
        assert coarsest.matrix is not None
        coarsest.coarse_solver = CoarseSolver.build(coarsest.matrix, coarsest.space, self.ctx.layout.num_nodes)

        missing = any(level.patches is None for level in self.levels[1:])
        if rebuild or missing:
            self._build_patches(U, variant)

    def _build_patches(self, U: FloatArray, variant: TangentVariant) -> None:
        self.rebuilds += 1
        for level in self.levels[1:]:
            assert level.matrix is not None
            if level is self.levels[-1] and self.config.surrogate:
                level.patches = build_surrogate_patches(
                    self.ctx, U, variant, level.indices, self.config.rep_point, level.index
                )
            else:
                level.patches = build_patches(level.matrix, level.indices, level.index)
        logger.debug(f"Vanka パッチを再構築しました ({self.rebuilds} 回目)")

    def __call__(self, rhs: FloatArray) -> FloatArray:
        """V サイクル 1 回。全境界 Dirichlet では J の核にある圧力定数成分を落として返す"""
        return normalize_pressure(self.ctx, mg_vcycle(self.levels, rhs, self.config))
