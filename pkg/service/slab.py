import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
import scipy.sparse as sp

from service.constitutive import FloatArray, TangentVariant
from service.exceptions import SlabSolveError
from service.femspace import interpolate, zero_mean_pressure
from service.forms import SpatialLinearization, SpatialOperator, SpatialState, spatial_residual
from service.timebasis import TemporalBasis, TemporalMatrices, TimePartition, temporal_matrices

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlabLayout:
    """スラブベクトルの並び: 時間節点ごとに (速度 M_v, 圧力 M_p)"""

    num_nodes: int
    M_v: int
    M_p: int

    @property
    def spatial(self) -> int:
        return self.M_v + self.M_p

    @property
    def size(self) -> int:
        return self.num_nodes * self.spatial

    def blocks(self, U: FloatArray) -> FloatArray:
        return U.reshape(self.num_nodes, self.spatial)

    def velocity(self, U: FloatArray) -> FloatArray:
        return self.blocks(U)[:, : self.M_v]

    def pressure(self, U: FloatArray) -> FloatArray:
        return self.blocks(U)[:, self.M_v:]

    def node_state(self, U: FloatArray, mu: int, t: float) -> SpatialState:
        block = self.blocks(U)[mu]
        return SpatialState(v=block[: self.M_v], pi=block[self.M_v:], t=t)

    def assemble(self, velocity: FloatArray, pressure: FloatArray) -> FloatArray:
        return np.concatenate([velocity, pressure], axis=1).ravel()


@dataclass
class SlabContext:
    """
    1 つの時間ステップ I_n = (t_{n-1}, t_n] の代数系

    v_prev は前スラブから流入する速度 v⁻_{n-1}。
    """

    operator: SpatialOperator
    basis: TemporalBasis
    interval: tuple[float, float]
    v_prev: FloatArray = field(repr=False)
    index: int = 1

    def __post_init__(self) -> None:
        if not self.interval[1] > self.interval[0]:
            raise ValueError(f"時間区間が不正です: {self.interval}")

    @cached_property
    def matrices(self) -> TemporalMatrices:
        return temporal_matrices(self.basis)

    @property
    def tau(self) -> float:
        return self.interval[1] - self.interval[0]

    @cached_property
    def node_times(self) -> FloatArray:
        return self.interval[0] + self.tau * self.basis.nodes

    @cached_property
    def layout(self) -> SlabLayout:
        space = self.operator.space
        return SlabLayout(num_nodes=self.basis.k + 1, M_v=space.M_v, M_p=space.M_p)

    @cached_property
    def node_weights(self) -> FloatArray:
        """τ_n · diag(M_t)。Radau 則では M_t は重みの対角行列"""
        return self.tau * self.basis.weights

    @cached_property
    def block_mass(self) -> sp.csr_matrix:
        return sp.kron(self.tau * self.matrices.M_t, self.operator.space.mixed_mass, format="csr")

    @cached_property
    def time_derivative(self) -> sp.csr_matrix:
        return sp.kron(self.matrices.K_t, self.operator.space.velocity_only_mass, format="csr")

    def node_states(self, U: FloatArray) -> list[SpatialState]:
        return [self.layout.node_state(U, mu, float(t)) for mu, t in enumerate(self.node_times)]

    def with_operator(self, operator: SpatialOperator, v_prev: FloatArray) -> "SlabContext":
        return SlabContext(operator=operator, basis=self.basis, interval=self.interval,
                           v_prev=v_prev, index=self.index)


def slab_residual(ctx: SlabContext, U: FloatArray, advect: FloatArray | None = None) -> FloatArray:
    """
    R_n(U) = -[(K_t⊗M_x)V - (m_t⊗M_x)v⁻; 0] + τ(M_t⊗I)F(U)

    Args:
        ctx: スラブの文脈
        U: スラブベクトル
        advect: CIP と流入重みの凍結に使う速度場 (None なら U 自身)

    Returns:
        スラブ残差
    """
    layout = ctx.layout
    mass_x = ctx.operator.space.velocity_mass
    states = ctx.node_states(U)
    lagged = states if advect is None else ctx.node_states(advect)

    spatial = np.stack([
        spatial_residual(ctx.operator, state, lagged_state)
        for state, lagged_state in zip(states, lagged)
    ])
    out = ctx.node_weights[:, None] * spatial

    velocity = layout.velocity(U)
    time_term = ctx.matrices.K_t @ (mass_x @ velocity.T).T
    jump_term = np.outer(ctx.matrices.m_t, mass_x @ ctx.v_prev)
    out[:, : layout.M_v] -= time_term - jump_term
    return out.ravel()


class SlabLinearization:
    """凍結した節点ごとの J_μ から組むスラブ Jacobian"""

    def __init__(
        self,
        ctx: SlabContext,
        U: FloatArray,
        variant: TangentVariant,
        advect: FloatArray | None = None,
    ):
        self.ctx = ctx
        self.variant = variant
        states = ctx.node_states(U)
        lagged = states if advect is None else ctx.node_states(advect)
        self.nodes: list[SpatialLinearization] = [
            ctx.operator.linearize(state, variant, lagged_state)
            for state, lagged_state in zip(states, lagged)
        ]

    @property
    def size(self) -> int:
        return self.ctx.layout.size

    def apply(self, dU: FloatArray) -> FloatArray:
        ctx = self.ctx
        layout = ctx.layout
        blocks = layout.blocks(dU)
        out = np.stack([
            weight * node.apply(block)
            for weight, node, block in zip(ctx.node_weights, self.nodes, blocks)
        ])
        velocity = blocks[:, : layout.M_v]
        out[:, : layout.M_v] += ctx.matrices.K_t @ (ctx.operator.space.velocity_mass @ velocity.T).T
        return out.ravel()

    def spatial_blocks(self) -> list[sp.csr_matrix]:
        return [node.assemble() for node in self.nodes]

    def assemble(self) -> sp.csr_matrix:
        return assemble_slab_matrix(self.ctx, self.spatial_blocks())


def slab_jacobian_apply(
    ctx: SlabContext,
    U: FloatArray,
    variant: TangentVariant,
    dU: FloatArray,
    advect: FloatArray | None = None,
) -> FloatArray:
    return SlabLinearization(ctx, U, variant, advect).apply(dU)


def assemble_slab_matrix(ctx: SlabContext, blocks: list[sp.csr_matrix]) -> sp.csr_matrix:
    """(K_t⊗[[M_x,0],[0,0]]) + τ blockdiag(w_μ J_μ)"""
    if len(blocks) != ctx.layout.num_nodes:
        raise ValueError(f"空間ブロック数が時間節点数と一致しません: {len(blocks)}")
    weighted = sp.block_diag(
        [weight * block for weight, block in zip(ctx.node_weights, blocks)], format="csr"
    )
    return (ctx.time_derivative + weighted).tocsr()


def left_trace(ctx: SlabContext, U: FloatArray) -> FloatArray:
    """右端 (参照点 1) の速度。Radau 則では最後の節点の値"""
    return ctx.layout.velocity(U)[-1].copy()


def left_endpoint_value(ctx: SlabContext, U: FloatArray) -> FloatArray:
    """区間左端での Lagrange 展開 Σ_μ m_t[μ] V_μ"""
    return ctx.matrices.m_t @ ctx.layout.velocity(U)


def initial_guess(ctx: SlabContext, previous_pressure: FloatArray | None = None) -> FloatArray:
    """流入トレースの時間方向定数延長。圧力は前スラブ最終節点 (初回は 0)"""
    layout = ctx.layout
    velocity = np.tile(ctx.v_prev, (layout.num_nodes, 1))
    if previous_pressure is None:
        pressure = np.zeros((layout.num_nodes, layout.M_p))
    else:
        pressure = np.tile(previous_pressure, (layout.num_nodes, 1))
    return layout.assemble(velocity, pressure)


def normalize_pressure(ctx: SlabContext, U: FloatArray) -> FloatArray:
    """全境界 Dirichlet のとき各節点の圧力を平均 0 にそろえる"""
    if ctx.operator.space.mesh.has_neumann:
        return U
    layout = ctx.layout
    pressure = np.stack([zero_mean_pressure(ctx.operator.space, block) for block in layout.pressure(U)])
    return layout.assemble(layout.velocity(U), pressure)


SlabSolver = Callable[[SlabContext, FloatArray], tuple[FloatArray, Any]]


@dataclass
class Trajectory:
    partition: TimePartition
    basis: TemporalBasis
    contexts: list[SlabContext]
    slabs: list[FloatArray]
    stats: list[Any]

    @property
    def final_velocity(self) -> FloatArray:
        return left_trace(self.contexts[-1], self.slabs[-1])


def initial_velocity(operator: SpatialOperator) -> FloatArray:
    def at_time(x: FloatArray, y: FloatArray, t: float) -> FloatArray:
        return operator.data.initial_velocity(x, y)
    return interpolate(operator.space.velocity, at_time, 0.0)


def march(
    operator: SpatialOperator,
    partition: TimePartition,
    basis: TemporalBasis,
    solver: SlabSolver,
    v0: FloatArray | None = None,
    progress_callback: Callable[[str], None] | None = None,
) -> Trajectory:
    """
    スラブを時間順に逐次解く

    Args:
        operator: 空間演算子
        partition: 時間分割
        basis: 時間基底
        solver: (ctx, U0) -> (U, stats) のスラブソルバー
        v0: 初期速度係数 (None なら初期データを補間)
        progress_callback: 進捗通知

    Returns:
        全スラブの解と統計

    Raises:
        SlabSolveError: いずれかのスラブで失敗 (slab_index を付与)
    """
    def notify(message: str) -> None:
        if progress_callback:
            progress_callback(message)

    v_prev = initial_velocity(operator) if v0 is None else v0
    previous_pressure: FloatArray | None = None
    contexts, slabs, stats = [], [], []
    for n in range(1, partition.num_steps + 1):
        ctx = SlabContext(operator=operator, basis=basis, interval=partition.interval(n),
                          v_prev=v_prev, index=n)
        try:
            U, slab_stats = solver(ctx, initial_guess(ctx, previous_pressure))
        except SlabSolveError as e:
            e.slab_index = n
            logger.error(f"スラブ {n} の求解に失敗しました: {e}")
            raise
        U = normalize_pressure(ctx, U)
        contexts.append(ctx)
        slabs.append(U)
        stats.append(slab_stats)
        v_prev = left_trace(ctx, U)
        previous_pressure = ctx.layout.pressure(U)[-1].copy()
        notify(f"スラブ {n}/{partition.num_steps} を完了しました")
    return Trajectory(partition=partition, basis=basis, contexts=contexts, slabs=slabs, stats=stats)
