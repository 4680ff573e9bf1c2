from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from service.constitutive import (
    FloatArray,
    ModelParams,
    TangentKind,
    TangentVariant,
    stress_field,
    tangent_coefficients,
)
from service.femspace import FaceTable, MixedSpace, VectorField, dirichlet_lifting
from service.mesh import BoundaryTag, IntArray, Side

IDENTITY2 = np.eye(2)
EXACT = TangentVariant(TangentKind.EXN)

LocalKernel = Callable[[FloatArray], FloatArray]


def zero_vector_field(x: FloatArray, y: FloatArray, t: float) -> FloatArray:
    return np.zeros((2,) + np.shape(x))


def zero_initial_velocity(x: FloatArray, y: FloatArray) -> FloatArray:
    return np.zeros((2,) + np.shape(x))


@dataclass(frozen=True)
class DiscretizationConfig:
    """
    空間離散化の設定

    lifting を与えると Dirichlet 持ち上げとして固定で使う。None のときは各節点時刻で
    g_D の境界節点補間から作る。
    """

    gamma1: float = 1e3
    gamma2: float = 1e3
    gamma_cip: float = 1.0
    lifting: FloatArray | None = field(default=None, compare=False, repr=False)
    convection: bool = True
    picard_oseen: bool = False

    def __post_init__(self) -> None:
        if self.gamma1 <= 0.0 or self.gamma2 <= 0.0:
            raise ValueError(
                f"Nitsche ペナルティは正の値が必要です: gamma1={self.gamma1}, gamma2={self.gamma2}"
            )
        if self.gamma_cip < 0.0:
            raise ValueError(f"gamma_cip は 0 以上で指定してください: {self.gamma_cip}")


@dataclass(frozen=True)
class SpatialState:
    v: FloatArray
    pi: FloatArray
    t: float = 0.0


@dataclass(frozen=True)
class ProblemData:
    forcing: VectorField = zero_vector_field
    dirichlet: VectorField = zero_vector_field
    initial_velocity: Callable[[FloatArray, FloatArray], FloatArray] = zero_initial_velocity


@dataclass(frozen=True)
class BoundaryGroup:
    """同じ辺に属する境界面の集まり"""

    side: Side
    cells: IntArray
    dirichlet: FloatArray
    face_length: float


@dataclass(frozen=True)
class CipGroup:
    """同じ向きの内部面の集まり。first が法線の根元側のセル"""

    first: IntArray
    second: IntArray
    first_table: FaceTable
    second_table: FaceTable
    normal: FloatArray
    face_length: float


def _sym(matrix: FloatArray) -> FloatArray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def _components(matrix: FloatArray) -> FloatArray:
    return np.stack([matrix[..., 0, 0], matrix[..., 1, 1], matrix[..., 0, 1]], axis=-1)


def _matrix(components: FloatArray) -> FloatArray:
    out = np.empty(components.shape[:-1] + (2, 2))
    out[..., 0, 0] = components[..., 0]
    out[..., 1, 1] = components[..., 1]
    out[..., 0, 1] = components[..., 2]
    out[..., 1, 0] = components[..., 2]
    return out


def _negative_part(y: FloatArray) -> FloatArray:
    return 0.5 * (np.abs(y) - y)


def _tangent(eta: FloatArray, kappa: FloatArray, a: FloatArray, direction: FloatArray) -> FloatArray:
    """ηB + κ(A:B)A。eta, kappa は (n, nq)、direction は (n, nb, nq, 2, 2)"""
    contraction = np.einsum("cqij,cbqij->cbq", a, direction)
    return (
        eta[:, None, :, None, None] * direction
        + (kappa[:, None, :] * contraction)[..., None, None] * a[:, None]
    )


def _scatter(size: int, index: IntArray, local: FloatArray) -> FloatArray:
    return np.bincount(index.ravel(), weights=local.ravel(), minlength=size)


class SpatialOperator:
    """
    1 つの時間節点における空間残差 F と Jacobian J の評価器

    残差は「右辺 − 左辺」の規約で組み立てる。
    """

    def __init__(
        self,
        space: MixedSpace,
        data: ProblemData,
        params: ModelParams,
        config: DiscretizationConfig,
    ):
        self.space = space
        self.data = data
        self.params = params
        self.config = config
        self.boundary_groups = self._build_boundary_groups()
        self.cip_groups = self._build_cip_groups()

    @property
    def size(self) -> int:
        return self.space.size

    @property
    def convective(self) -> bool:
        return self.config.convection

    @property
    def stabilized(self) -> bool:
        return self.config.convection and self.config.gamma_cip > 0.0 and len(self.cip_groups) > 0

    def _build_boundary_groups(self) -> list[BoundaryGroup]:
        mesh = self.space.mesh
        groups = []
        for side in (Side.LEFT, Side.RIGHT, Side.BOTTOM, Side.TOP):
            faces = [f for f in mesh.boundary_faces if f.side == side]
            groups.append(BoundaryGroup(
                side=side,
                cells=np.array([f.cells[0] for f in faces], dtype=np.int64),
                dirichlet=np.array([1.0 if f.tag == BoundaryTag.DIRICHLET else 0.0 for f in faces]),
                face_length=faces[0].diameter,
            ))
        return groups

    def _build_cip_groups(self) -> list[CipGroup]:
        mesh = self.space.mesh
        tables = self.space.face_tables
        i, j = mesh.cell_ij
        cells = np.arange(mesh.num_cells, dtype=np.int64)
        groups = []
        if mesh.nx > 1:
            first = cells[i < mesh.nx - 1]
            groups.append(CipGroup(
                first=first,
                second=first + 1,
                first_table=tables[Side.RIGHT],
                second_table=tables[Side.LEFT],
                normal=np.array([1.0, 0.0]),
                face_length=mesh.hy,
            ))
        if mesh.ny > 1:
            first = cells[j < mesh.ny - 1]
            groups.append(CipGroup(
                first=first,
                second=first + mesh.nx,
                first_table=tables[Side.TOP],
                second_table=tables[Side.BOTTOM],
                normal=np.array([0.0, 1.0]),
                face_length=mesh.hx,
            ))
        return groups

    def cip_index(self, group: CipGroup) -> IntArray:
        dofs = self.space.velocity.cell_dofs
        return np.concatenate([dofs[group.first], dofs[group.second]], axis=1)

    def lifting_at(self, t: float) -> FloatArray:
        if self.config.lifting is not None:
            return self.config.lifting
        return dirichlet_lifting(self.space.velocity, self.data.dirichlet, t)

    def split(self, vector: FloatArray) -> tuple[FloatArray, FloatArray]:
        return vector[: self.space.M_v], vector[self.space.M_v:]

    def _local_velocity(self, v: FloatArray) -> FloatArray:
        return v[self.space.velocity.cell_dofs].reshape(-1, 2, 9)

    def _local_pressure(self, pi: FloatArray) -> FloatArray:
        return pi[self.space.pressure.cell_dofs]

    def _lifting_fields(self, group: BoundaryGroup, lifting_local: FloatArray):
        """境界積分点での Dĝ_D とそこで凍結した粘性係数"""
        table = self.space.face_tables[group.side]
        grad = np.einsum("qaj,fia->fqij", table.gradients, lifting_local[group.cells])
        a_lift = _sym(grad)
        eta_d, kappa_d = tangent_coefficients(EXACT, self.params, _components(a_lift))
        return a_lift, eta_d, kappa_d

    def _nitsche_local(
        self,
        group: BoundaryGroup,
        trace: FloatArray,
        inflow: FloatArray,
        lifting_fields,
    ) -> FloatArray:
        """
        B_γ(u, w) の局所ベクトル (nf, 21)。trace は境界積分点での u

        圧力の試験関数には +∫ mask (u·n) q を与える。A_γ では b(u, q) = −∫ q div u と足して
        q = 定数 の行が 0 になり、速度行の +∫ π (w·n) と対になって圧力結合は対称。
        圧力定数は J と Jᵀ の両方の核に入る。
        """
        table = self.space.face_tables[group.side]
        n = table.normal
        h = group.face_length
        mask = group.dirichlet[:, None]
        a_lift, eta_d, kappa_d = lifting_fields
        normal_trace = trace @ n

        value = (self.config.gamma1 / h) * eta_d[..., None] * trace
        value += (self.config.gamma2 / h) * normal_trace[..., None] * n
        if self.convective:
            value -= inflow[..., None] * trace
        value *= mask[..., None]

        z = _sym(trace[..., :, None] * n[None, None, None, :])
        grad_flux = -mask[..., None, None] * _tangent(eta_d, kappa_d, a_lift, z[:, None])[:, 0]

        out_v = np.einsum("q,fqi,qa->fia", table.weights, value, table.values)
        out_v += np.einsum("q,fqij,qaj->fia", table.weights, grad_flux, table.gradients)
        out_p = np.einsum("q,fq,qk->fk", table.weights, mask * normal_trace, table.pressure_values)
        return np.concatenate([out_v.reshape(len(group.cells), 18), out_p], axis=1)

    def nitsche_form(self, v: FloatArray, t: float, advect: FloatArray | None = None) -> FloatArray:
        """全試験関数に対する B_γ(v, w) (v の境界トレースのみに依存)"""
        lifting_local = self._local_velocity(self.lifting_at(t))
        advect_local = self._local_velocity(v if advect is None else advect)
        local_v = self._local_velocity(v)
        out = np.zeros(self.size)
        for group in self.boundary_groups:
            table = self.space.face_tables[group.side]
            trace = np.einsum("qa,fia->fqi", table.values, local_v[group.cells])
            lagged = np.einsum("qa,fia->fqi", table.values, advect_local[group.cells])
            local = self._nitsche_local(
                group, trace, _negative_part(lagged @ table.normal),
                self._lifting_fields(group, lifting_local),
            )
            out += _scatter(self.size, self.space.cell_dofs[group.cells], local)
        return out

    def residual(self, state: SpatialState, advect: SpatialState | None = None) -> FloatArray:
        """F(u) = ⟨f, w⟩ + B_γ(g_D, w) − A_γ(u)(w)"""
        space = self.space
        local_v = self._local_velocity(state.v)
        local_p = self._local_pressure(state.pi)
        advect_local = local_v if advect is None else self._local_velocity(advect.v)

        out = _scatter(self.size, space.cell_dofs, self._volume_residual(local_v, local_p, state.t))
        lifting_local = self._local_velocity(self.lifting_at(state.t))
        for group in self.boundary_groups:
            local = self._boundary_residual(group, local_v, local_p, advect_local, lifting_local, state.t)
            out += _scatter(self.size, space.cell_dofs[group.cells], local)
        if self.stabilized:
            for group in self.cip_groups:
                local = self._cip_residual(group, local_v, advect_local)
                out += _scatter(self.size, self.cip_index(group), local)
        return out

    def _volume_residual(self, local_v: FloatArray, local_p: FloatArray, t: float) -> FloatArray:
        space = self.space
        values = space.volume_values
        gradients = space.volume_gradients
        weights = space.volume_weights
        velocity = np.einsum("qa,cia->cqi", values, local_v)
        grad = np.einsum("qaj,cia->cqij", gradients, local_v)
        pressure = np.einsum("qk,ck->cq", space.volume_pressure_values, local_p)

        flux = -_matrix(stress_field(self.params, _components(_sym(grad))))
        flux += pressure[..., None, None] * IDENTITY2
        if self.convective:
            flux += velocity[..., :, None] * velocity[..., None, :]
        x, y = space.quadrature_coordinates
        force = np.moveaxis(np.asarray(self.data.forcing(x, y, t), dtype=np.float64), 0, -1)

        out_v = np.einsum("q,cqi,qa->cia", weights, force, values)
        out_v += np.einsum("q,cqij,qaj->cia", weights, flux, gradients)
        divergence = grad[..., 0, 0] + grad[..., 1, 1]
        out_p = np.einsum("q,cq,qk->ck", weights, divergence, space.volume_pressure_values)
        return np.concatenate([out_v.reshape(-1, 18), out_p], axis=1)

    def _boundary_residual(
        self,
        group: BoundaryGroup,
        local_v: FloatArray,
        local_p: FloatArray,
        advect_local: FloatArray,
        lifting_local: FloatArray,
        t: float,
    ) -> FloatArray:
        table = self.space.face_tables[group.side]
        n = table.normal
        mask = group.dirichlet[:, None]
        cells = group.cells
        trace = np.einsum("qa,fia->fqi", table.values, local_v[cells])
        grad = np.einsum("qaj,fia->fqij", table.gradients, local_v[cells])
        pressure = np.einsum("qk,fk->fq", table.pressure_values, local_p[cells])
        x, y = self.space.face_coordinates(group.side, cells)
        data = np.moveaxis(np.asarray(self.data.dirichlet(x, y, t), dtype=np.float64), 0, -1)

        value = np.zeros_like(trace)
        if self.convective:
            value -= (trace @ n)[..., None] * trace
        stress_normal = _matrix(stress_field(self.params, _components(_sym(grad)))) @ n
        value += mask[..., None] * (stress_normal - pressure[..., None] * n)
        out_v = np.einsum("q,fqi,qa->fia", table.weights, value, table.values).reshape(len(cells), 18)
        consistency = np.concatenate([out_v, np.zeros((len(cells), 3))], axis=1)

        lifting_fields = self._lifting_fields(group, lifting_local)
        lagged = np.einsum("qa,fia->fqi", table.values, advect_local[cells])
        state_form = self._nitsche_local(group, trace, _negative_part(lagged @ n), lifting_fields)
        data_form = self._nitsche_local(group, data, _negative_part(data @ n), lifting_fields)
        return consistency + data_form - state_form

    def _normal_derivative_tables(self, group: CipGroup) -> tuple[FloatArray, FloatArray]:
        return (
            group.first_table.gradients @ group.normal,
            group.second_table.gradients @ group.normal,
        )

    def _cip_weight(self, group: CipGroup, advect_local: FloatArray) -> FloatArray:
        lagged = np.einsum("qa,fia->fqi", group.first_table.values, advect_local[group.first])
        return self.config.gamma_cip * group.face_length**2 * np.abs(lagged @ group.normal)

    def _cip_residual(self, group: CipGroup, local_v: FloatArray, advect_local: FloatArray) -> FloatArray:
        dn_first, dn_second = self._normal_derivative_tables(group)
        jump = (
            np.einsum("qa,fia->fqi", dn_second, local_v[group.second])
            - np.einsum("qa,fia->fqi", dn_first, local_v[group.first])
        )
        weighted = self._cip_weight(group, advect_local)[..., None] * jump
        weights = group.first_table.weights
        out_first = np.einsum("q,fqi,qa->fia", weights, weighted, dn_first)
        out_second = -np.einsum("q,fqi,qa->fia", weights, weighted, dn_second)
        count = len(group.first)
        return np.concatenate([out_first.reshape(count, 18), out_second.reshape(count, 18)], axis=1)

    def linearize(
        self,
        state: SpatialState,
        variant: TangentVariant,
        advect: SpatialState | None = None,
    ) -> "SpatialLinearization":
        return SpatialLinearization(self, state, variant, advect)


@dataclass
class _VolumeFrozen:
    a: FloatArray
    velocity: FloatArray
    eta: FloatArray
    kappa: FloatArray


@dataclass
class _BoundaryFrozen:
    group: BoundaryGroup
    a: FloatArray
    velocity: FloatArray
    eta: FloatArray
    kappa: FloatArray
    inflow: FloatArray
    a_lift: FloatArray
    eta_lift: FloatArray
    kappa_lift: FloatArray


@dataclass
class _CipFrozen:
    group: CipGroup
    weight: FloatArray


class SpatialLinearization:
    """
    凍結した係数での J_μ = [[A_μ, B_μᵀ], [B_μ, 0]]

    行列を作らない作用 apply と疎行列 assemble は同じ局所カーネルを共有する。
    """

    def __init__(
        self,
        operator: SpatialOperator,
        state: SpatialState,
        variant: TangentVariant,
        advect: SpatialState | None = None,
    ):
        self.operator = operator
        self.variant = variant
        self.state = state
        space = operator.space
        params = operator.params
        local_v = operator._local_velocity(state.v)
        advect_local = local_v if advect is None else operator._local_velocity(advect.v)
        self.oseen = operator.config.picard_oseen and variant.kind == TangentKind.PIC

        grad = np.einsum("qaj,cia->cqij", space.volume_gradients, local_v)
        a = _sym(grad)
        eta, kappa = tangent_coefficients(variant, params, _components(a))
        self.volume = _VolumeFrozen(
            a=a,
            velocity=np.einsum("qa,cia->cqi", space.volume_values, local_v),
            eta=eta,
            kappa=kappa,
        )

        lifting_local = operator._local_velocity(operator.lifting_at(state.t))
        self.boundary: list[_BoundaryFrozen] = []
        for group in operator.boundary_groups:
            table = space.face_tables[group.side]
            cells = group.cells
            a_face = _sym(np.einsum("qaj,fia->fqij", table.gradients, local_v[cells]))
            eta_face, kappa_face = tangent_coefficients(variant, params, _components(a_face))
            lagged = np.einsum("qa,fia->fqi", table.values, advect_local[cells])
            a_lift, eta_lift, kappa_lift = operator._lifting_fields(group, lifting_local)
            self.boundary.append(_BoundaryFrozen(
                group=group,
                a=a_face,
                velocity=np.einsum("qa,fia->fqi", table.values, local_v[cells]),
                eta=eta_face,
                kappa=kappa_face,
                inflow=_negative_part(lagged @ table.normal),
                a_lift=a_lift,
                eta_lift=eta_lift,
                kappa_lift=kappa_lift,
            ))

        self.cip: list[_CipFrozen] = []
        if operator.stabilized:
            for group in operator.cip_groups:
                self.cip.append(_CipFrozen(group=group, weight=operator._cip_weight(group, advect_local)))

    @property
    def size(self) -> int:
        return self.operator.size

    def _blocks(self) -> list[tuple[IntArray, LocalKernel]]:
        dofs = self.operator.space.cell_dofs
        blocks: list[tuple[IntArray, LocalKernel]] = [(dofs, self._volume_action)]
        for frozen in self.boundary:
            blocks.append((dofs[frozen.group.cells], self._boundary_kernel(frozen)))
        for frozen in self.cip:
            blocks.append((self.operator.cip_index(frozen.group), self._cip_kernel(frozen)))
        return blocks

    def apply(self, direction: FloatArray) -> FloatArray:
        out = np.zeros(self.size)
        for index, kernel in self._blocks():
            local = kernel(direction[index][:, None, :])[:, 0, :]
            out += _scatter(self.size, index, local)
        return out

    def assemble(self) -> sp.csr_matrix:
        rows, cols, data = [], [], []
        for index, kernel in self._blocks():
            count, width = index.shape
            unit = np.broadcast_to(np.eye(width), (count, width, width))
            local = kernel(unit)
            rows.append(np.broadcast_to(index[:, None, :], local.shape).ravel())
            cols.append(np.broadcast_to(index[:, :, None], local.shape).ravel())
            data.append(local.ravel())
        matrix = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, self.size),
        ).tocsr()
        matrix.eliminate_zeros()
        return matrix

    def _volume_action(self, directions: FloatArray) -> FloatArray:
        space = self.operator.space
        frozen = self.volume
        count, batch = directions.shape[:2]
        dv = directions[..., :18].reshape(count, batch, 2, 9)
        dp = directions[..., 18:]
        values = space.volume_values
        gradients = space.volume_gradients
        weights = space.volume_weights

        w = np.einsum("qa,cbia->cbqi", values, dv)
        grad_w = np.einsum("qaj,cbia->cbqij", gradients, dv)
        flux = _tangent(frozen.eta, frozen.kappa, frozen.a, _sym(grad_w))
        if self.operator.convective:
            velocity = frozen.velocity[:, None]
            flux -= w[..., :, None] * velocity[..., None, :]
            if not self.oseen:
                flux -= velocity[..., :, None] * w[..., None, :]
        pressure = np.einsum("qk,cbk->cbq", space.volume_pressure_values, dp)
        flux -= pressure[..., None, None] * IDENTITY2

        out_v = np.einsum("q,cbqij,qaj->cbia", weights, flux, gradients).reshape(count, batch, 18)
        divergence = grad_w[..., 0, 0] + grad_w[..., 1, 1]
        out_p = -np.einsum("q,cbq,qk->cbk", weights, divergence, space.volume_pressure_values)
        return np.concatenate([out_v, out_p], axis=-1)

    def _boundary_kernel(self, frozen: _BoundaryFrozen) -> LocalKernel:
        def kernel(directions: FloatArray) -> FloatArray:
            return self._boundary_action(frozen, directions)
        return kernel

    def _boundary_action(self, frozen: _BoundaryFrozen, directions: FloatArray) -> FloatArray:
        operator = self.operator
        config = operator.config
        group = frozen.group
        table = operator.space.face_tables[group.side]
        n = table.normal
        h = group.face_length
        count, batch = directions.shape[:2]
        dv = directions[..., :18].reshape(count, batch, 2, 9)
        dp = directions[..., 18:]
        mask = group.dirichlet[:, None, None]

        w = np.einsum("qa,fbia->fbqi", table.values, dv)
        grad_w = np.einsum("qaj,fbia->fbqij", table.gradients, dv)
        pressure = np.einsum("qk,fbk->fbq", table.pressure_values, dp)
        w_normal = w @ n

        value = np.zeros_like(w)
        if operator.convective:
            velocity = frozen.velocity[:, None]
            value += (velocity @ n)[..., None] * w
            if not self.oseen:
                value += w_normal[..., None] * velocity
            value -= mask[..., None] * frozen.inflow[:, None, :, None] * w
        tangent_normal = _tangent(frozen.eta, frozen.kappa, frozen.a, _sym(grad_w)) @ n
        dirichlet_value = -tangent_normal + pressure[..., None] * n
        dirichlet_value += (config.gamma1 / h) * frozen.eta_lift[:, None, :, None] * w
        dirichlet_value += (config.gamma2 / h) * w_normal[..., None] * n
        value += mask[..., None] * dirichlet_value

        z = _sym(w[..., :, None] * n)
        grad_flux = -mask[..., None, None] * _tangent(frozen.eta_lift, frozen.kappa_lift, frozen.a_lift, z)

        out_v = np.einsum("q,fbqi,qa->fbia", table.weights, value, table.values)
        out_v += np.einsum("q,fbqij,qaj->fbia", table.weights, grad_flux, table.gradients)
        out_p = np.einsum("q,fbq,qk->fbk", table.weights, mask * w_normal, table.pressure_values)
        return np.concatenate([out_v.reshape(count, batch, 18), out_p], axis=-1)

    def _cip_kernel(self, frozen: _CipFrozen) -> LocalKernel:
        def kernel(directions: FloatArray) -> FloatArray:
            return self._cip_action(frozen, directions)
        return kernel

    def _cip_action(self, frozen: _CipFrozen, directions: FloatArray) -> FloatArray:
        group = frozen.group
        count, batch = directions.shape[:2]
        first = directions[..., :18].reshape(count, batch, 2, 9)
        second = directions[..., 18:].reshape(count, batch, 2, 9)
        dn_first, dn_second = self.operator._normal_derivative_tables(group)
        jump = (
            np.einsum("qa,fbia->fbqi", dn_second, second)
            - np.einsum("qa,fbia->fbqi", dn_first, first)
        )
        weighted = frozen.weight[:, None, :, None] * jump
        weights = group.first_table.weights
        out_first = -np.einsum("q,fbqi,qa->fbia", weights, weighted, dn_first)
        out_second = np.einsum("q,fbqi,qa->fbia", weights, weighted, dn_second)
        return np.concatenate(
            [out_first.reshape(count, batch, 18), out_second.reshape(count, batch, 18)], axis=-1
        )


def spatial_residual(
    operator: SpatialOperator, state: SpatialState, advect: SpatialState | None = None
) -> FloatArray:
    return operator.residual(state, advect)


def spatial_jacobian_apply(
    operator: SpatialOperator,
    state: SpatialState,
    variant: TangentVariant,
    direction: FloatArray,
    advect: SpatialState | None = None,
) -> FloatArray:
    return operator.linearize(state, variant, advect).apply(direction)


def spatial_jacobian_assemble(
    operator: SpatialOperator,
    state: SpatialState,
    variant: TangentVariant,
    advect: SpatialState | None = None,
) -> sp.csr_matrix:
    return operator.linearize(state, variant, advect).assemble()


@dataclass(frozen=True)
class CoercivityReport:
    lhs: float
    bound: float
    strain_norm2: float
    boundary_norm2: float
    normal_norm2: float
    trace_constant: float


def _strain_tables(gradients: FloatArray) -> FloatArray:
    """ϕ = N_a e_i の対称勾配 (nq, 18, 2, 2)"""
    count = gradients.shape[0]
    out = np.zeros((count, 2, 9, 2, 2))
    for i in range(2):
        out[:, i, :, i, :] += 0.5 * gradients
        out[:, i, :, :, i] += 0.5 * gradients
    return out.reshape(count, 18, 2, 2)


def trace_inverse_constant(operator: SpatialOperator) -> float:
    """
    離散トレース不等式 ‖h^{1/2} Dv‖²_{Γ_D} ≤ c ‖Dv‖²_Ω の c をセルごとの一般化固有値で測る
    """
    space = operator.space
    volume = _strain_tables(space.volume_gradients)
    volume_gram = np.einsum("q,qaij,qbij->ab", space.volume_weights, volume, volume)
    eigenvalues, eigenvectors = la.eigh(volume_gram)
    keep = eigenvalues > 1e-12 * eigenvalues.max()
    reduction = eigenvectors[:, keep] / np.sqrt(eigenvalues[keep])

    face_grams: dict[int, FloatArray] = {}
    for group in operator.boundary_groups:
        table = space.face_tables[group.side]
        strain = _strain_tables(table.gradients)
        gram = group.face_length * np.einsum("q,qaij,qbij->ab", table.weights, strain, strain)
        for cell, is_dirichlet in zip(group.cells.tolist(), group.dirichlet.tolist()):
            if is_dirichlet:
                face_grams[cell] = face_grams.get(cell, np.zeros_like(gram)) + gram

    constant = 0.0
    for gram in face_grams.values():
        reduced = reduction.T @ gram @ reduction
        constant = max(constant, float(la.eigvalsh(reduced).max()))
    return constant


def coercivity_check(
    operator: SpatialOperator,
    v: FloatArray,
    state: SpatialState,
    variant: TangentVariant,
) -> CoercivityReport:
    """
    線形化した粘性・Nitsche 項 a_★(v, v) と下界を計算

    Raises:
        ValueError: nu_inf = 0 (下界が意味を持たない)
    """
    params = operator.params
    if params.nu_inf <= 0.0:
        raise ValueError("coercivity_check には nu_inf > 0 が必要です")

    viscous = SpatialOperator(
        operator.space, operator.data, params, replace(operator.config, convection=False)
    )
    linearization = viscous.linearize(state, variant)
    direction = np.concatenate([v, np.zeros(operator.space.M_p)])
    lhs = float(direction @ linearization.apply(direction))

    space = operator.space
    local_v = operator._local_velocity(v)
    strain = _sym(np.einsum("qaj,cia->cqij", space.volume_gradients, local_v))
    strain_norm2 = float(np.einsum("q,cqij,cqij->", space.volume_weights, strain, strain))

    boundary_norm2 = 0.0
    normal_norm2 = 0.0
    largest = 0.0
    for frozen in linearization.boundary:
        group = frozen.group
        table = space.face_tables[group.side]
        trace = np.einsum("qa,fia->fqi", table.values, local_v[group.cells])
        scaled = group.dirichlet[:, None] / group.face_length
        boundary_norm2 += float(np.einsum("q,fq,fqi,fqi->", table.weights, scaled, trace, trace))
        normal_norm2 += float(np.einsum("q,fq,fq->", table.weights, scaled, (trace @ table.normal) ** 2))
        active = group.dirichlet > 0.0
        if np.any(active):
            state_eig = frozen.eta + np.maximum(0.0, frozen.kappa * np.einsum("fqij,fqij->fq", frozen.a, frozen.a))
            lift_eig = frozen.eta_lift + np.maximum(
                0.0, frozen.kappa_lift * np.einsum("fqij,fqij->fq", frozen.a_lift, frozen.a_lift)
            )
            largest = max(largest, float((state_eig + lift_eig)[active].max()))

    trace_constant = largest**2 * trace_inverse_constant(operator) / (2.0 * params.nu_inf)
    bound = (
        0.5 * params.nu_inf * strain_norm2
        + (operator.config.gamma1 * params.nu_inf - trace_constant) * boundary_norm2
        + operator.config.gamma2 * normal_norm2
    )
    return CoercivityReport(
        lhs=lhs,
        bound=bound,
        strain_norm2=strain_norm2,
        boundary_norm2=boundary_norm2,
        normal_norm2=normal_norm2,
        trace_constant=trace_constant,
    )
