from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre

from service.constitutive import FloatArray
from service.mesh import BoundaryTag, IntArray, Side, StructuredQuadMesh

VectorField = Callable[[FloatArray, FloatArray, float], FloatArray]
ScalarField = Callable[[FloatArray, FloatArray, float], FloatArray]

DEFAULT_QUADRATURE = 4
SIDES = (Side.LEFT, Side.RIGHT, Side.BOTTOM, Side.TOP)


def quadratic_lagrange_1d(x: FloatArray) -> tuple[FloatArray, FloatArray]:
    """節点 0, 1/2, 1 の 1 次元 2 次 Lagrange 基底と導関数 (3, npts)"""
    values = np.stack([
        2.0 * (x - 0.5) * (x - 1.0),
        -4.0 * x * (x - 1.0),
        2.0 * x * (x - 0.5),
    ])
    derivatives = np.stack([
        4.0 * x - 3.0,
        -8.0 * x + 4.0,
        4.0 * x - 1.0,
    ])
    return values, derivatives


def q2_reference(xhat: FloatArray, yhat: FloatArray) -> tuple[FloatArray, FloatArray]:
    """
    Q2 参照基底の値 (npts, 9) と参照勾配 (npts, 9, 2)

    局所番号は a = 3*ly + lx。
    """
    vx, dx = quadratic_lagrange_1d(np.atleast_1d(xhat))
    vy, dy = quadratic_lagrange_1d(np.atleast_1d(yhat))
    values = np.einsum("ip,jp->pji", vx, vy).reshape(-1, 9)
    grad_x = np.einsum("ip,jp->pji", dx, vy).reshape(-1, 9)
    grad_y = np.einsum("ip,jp->pji", vx, dy).reshape(-1, 9)
    return values, np.stack([grad_x, grad_y], axis=-1)


def p1disc_reference(xhat: FloatArray, yhat: FloatArray) -> tuple[FloatArray, FloatArray]:
    """P1disc 参照基底 {1, x̂-1/2, ŷ-1/2}"""
    xhat = np.atleast_1d(xhat)
    yhat = np.atleast_1d(yhat)
    values = np.stack([np.ones_like(xhat), xhat - 0.5, yhat - 0.5], axis=-1)
    gradients = np.broadcast_to(
        np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), (xhat.size, 3, 2)
    ).copy()
    return values, gradients


@dataclass(frozen=True)
class SpatialQuadrature:
    q: int
    points: FloatArray
    weights: FloatArray
    line_points: FloatArray
    line_weights: FloatArray


def spatial_quadrature(q: int = DEFAULT_QUADRATURE) -> SpatialQuadrature:
    """参照正方形 [0,1]² 上の q×q テンソル Gauss 則"""
    if q < 1:
        raise ValueError(f"積分点数は 1 以上で指定してください: {q}")
    line, line_weights = legendre.leggauss(q)
    line = 0.5 * (line + 1.0)
    line_weights = 0.5 * line_weights
    xs, ys = np.meshgrid(line, line)
    points = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    weights = np.outer(line_weights, line_weights).ravel()
    return SpatialQuadrature(q=q, points=points, weights=weights, line_points=line, line_weights=line_weights)


def side_points(side: Side, line: FloatArray) -> tuple[FloatArray, FloatArray]:
    """辺上の参照座標"""
    zeros = np.zeros_like(line)
    ones = np.ones_like(line)
    if side == Side.LEFT:
        return zeros, line
    if side == Side.RIGHT:
        return ones, line
    if side == Side.BOTTOM:
        return line, zeros
    return line, ones


@dataclass(frozen=True)
class ShapeEval:
    values: FloatArray
    gradients: FloatArray


@dataclass(frozen=True)
class VelocitySpace:
    """連続 Q2 ベクトル速度空間。自由度は成分ごとにまとめて並べる"""

    mesh: StructuredQuadMesh

    @property
    def nodes_x(self) -> int:
        return 2 * self.mesh.nx + 1

    @property
    def nodes_y(self) -> int:
        return 2 * self.mesh.ny + 1

    @property
    def num_nodes(self) -> int:
        return self.nodes_x * self.nodes_y

    @property
    def num_dofs(self) -> int:
        return 2 * self.num_nodes

    @cached_property
    def cell_nodes(self) -> IntArray:
        i, j = self.mesh.cell_ij
        lx = np.tile(np.arange(3), 3)
        ly = np.repeat(np.arange(3), 3)
        columns = 2 * i[:, None] + lx[None, :]
        rows = 2 * j[:, None] + ly[None, :]
        return (rows * self.nodes_x + columns).astype(np.int64)

    @cached_property
    def cell_dofs(self) -> IntArray:
        return np.concatenate([self.cell_nodes, self.cell_nodes + self.num_nodes], axis=1)

    @cached_property
    def node_coordinates(self) -> tuple[FloatArray, FloatArray]:
        columns = np.arange(self.num_nodes) % self.nodes_x
        rows = np.arange(self.num_nodes) // self.nodes_x
        return (
            self.mesh.x0 + 0.5 * self.mesh.hx * columns,
            self.mesh.y0 + 0.5 * self.mesh.hy * rows,
        )

    @cached_property
    def dirichlet_nodes(self) -> IntArray:
        """Dirichlet 境界面上の節点番号 (スカラー)"""
        local_by_side = {
            Side.LEFT: [0, 3, 6],
            Side.RIGHT: [2, 5, 8],
            Side.BOTTOM: [0, 1, 2],
            Side.TOP: [6, 7, 8],
        }
        nodes: list[int] = []
        for face in self.mesh.boundary_faces:
            if face.tag == BoundaryTag.DIRICHLET and face.side is not None:
                nodes.extend(self.cell_nodes[face.cells[0], local_by_side[face.side]].tolist())
        return np.unique(np.asarray(nodes, dtype=np.int64))


@dataclass(frozen=True)
class PressureSpace:
    """不連続 P1 圧力空間"""

    mesh: StructuredQuadMesh

    @property
    def num_dofs(self) -> int:
        return 3 * self.mesh.num_cells

    @cached_property
    def cell_dofs(self) -> IntArray:
        return (3 * np.arange(self.mesh.num_cells)[:, None] + np.arange(3)[None, :]).astype(np.int64)

    @cached_property
    def constant_mode(self) -> FloatArray:
        """定数 1 を表す係数ベクトル"""
        mode = np.zeros(self.num_dofs)
        mode[0::3] = 1.0
        return mode


@dataclass(frozen=True)
class FaceTable:
    """ある辺上の面積分点での基底値"""

    side: Side
    normal: FloatArray
    weights: FloatArray
    values: FloatArray
    gradients: FloatArray
    pressure_values: FloatArray
    xhat: FloatArray
    yhat: FloatArray


@dataclass(frozen=True)
class MixedSpace:
    """Q2/P1disc の組と空間積分則"""

    mesh: StructuredQuadMesh
    quadrature_order: int = DEFAULT_QUADRATURE

    @cached_property
    def velocity(self) -> VelocitySpace:
        return VelocitySpace(self.mesh)

    @cached_property
    def pressure(self) -> PressureSpace:
        return PressureSpace(self.mesh)

    @cached_property
    def quadrature(self) -> SpatialQuadrature:
        return spatial_quadrature(self.quadrature_order)

    @property
    def M_v(self) -> int:
        return self.velocity.num_dofs

    @property
    def M_p(self) -> int:
        return self.pressure.num_dofs

    @property
    def size(self) -> int:
        return self.M_v + self.M_p

    @cached_property
    def cell_dofs(self) -> IntArray:
        """セルごとの局所自由度 (速度 18 + 圧力 3) の大域番号"""
        return np.concatenate([self.velocity.cell_dofs, self.M_v + self.pressure.cell_dofs], axis=1)

    @property
    def cell_measure(self) -> float:
        return self.mesh.hx * self.mesh.hy

    def physical_gradients(self, reference: FloatArray) -> FloatArray:
        return reference / np.array([self.mesh.hx, self.mesh.hy])

    @cached_property
    def volume_values(self) -> FloatArray:
        values, _ = q2_reference(self.quadrature.points[:, 0], self.quadrature.points[:, 1])
        return values

    @cached_property
    def volume_gradients(self) -> FloatArray:
        _, gradients = q2_reference(self.quadrature.points[:, 0], self.quadrature.points[:, 1])
        return self.physical_gradients(gradients)

    @cached_property
    def volume_pressure_values(self) -> FloatArray:
        values, _ = p1disc_reference(self.quadrature.points[:, 0], self.quadrature.points[:, 1])
        return values

    @cached_property
    def volume_weights(self) -> FloatArray:
        return self.quadrature.weights * self.cell_measure

    @cached_property
    def quadrature_coordinates(self) -> tuple[FloatArray, FloatArray]:
        """全セルの体積積分点の物理座標 (ncells, nq)"""
        x0, y0 = self.mesh.cell_origins
        return (
            x0[:, None] + self.mesh.hx * self.quadrature.points[None, :, 0],
            y0[:, None] + self.mesh.hy * self.quadrature.points[None, :, 1],
        )

    @cached_property
    def face_tables(self) -> dict[Side, FaceTable]:
        tables = {}
        for side in SIDES:
            xhat, yhat = side_points(side, self.quadrature.line_points)
            values, gradients = q2_reference(xhat, yhat)
            pressure_values, _ = p1disc_reference(xhat, yhat)
            length = self.mesh.hy if side in (Side.LEFT, Side.RIGHT) else self.mesh.hx
            normal = {
                Side.LEFT: (-1.0, 0.0),
                Side.RIGHT: (1.0, 0.0),
                Side.BOTTOM: (0.0, -1.0),
                Side.TOP: (0.0, 1.0),
            }[side]
            tables[side] = FaceTable(
                side=side,
                normal=np.array(normal),
                weights=self.quadrature.line_weights * length,
                values=values,
                gradients=self.physical_gradients(gradients),
                pressure_values=pressure_values,
                xhat=xhat,
                yhat=yhat,
            )
        return tables

    def face_coordinates(self, side: Side, cells: IntArray) -> tuple[FloatArray, FloatArray]:
        table = self.face_tables[side]
        x0, y0 = self.mesh.cell_origins
        return (
            x0[cells][:, None] + self.mesh.hx * table.xhat[None, :],
            y0[cells][:, None] + self.mesh.hy * table.yhat[None, :],
        )

    @cached_property
    def velocity_mass(self) -> sp.csr_matrix:
        """速度質量行列 M_x (成分ブロック対角)"""
        local = np.einsum(
            "q,qa,qb->ab", self.volume_weights, self.volume_values, self.volume_values
        )
        nodes = self.velocity.cell_nodes
        ncells = self.mesh.num_cells
        rows = np.repeat(nodes, 9, axis=1).ravel()
        cols = np.tile(nodes, (1, 9)).ravel()
        data = np.tile(local.ravel(), ncells)
        scalar = sp.coo_matrix(
            (data, (rows, cols)), shape=(self.velocity.num_nodes, self.velocity.num_nodes)
        ).tocsr()
        return sp.block_diag([scalar, scalar], format="csr")

    @cached_property
    def pressure_mass(self) -> sp.csr_matrix:
        local = np.einsum(
            "q,qa,qb->ab", self.volume_weights, self.volume_pressure_values, self.volume_pressure_values
        )
        return sp.block_diag([local] * self.mesh.num_cells, format="csr")

    @cached_property
    def mixed_mass(self) -> sp.csr_matrix:
        return sp.block_diag([self.velocity_mass, self.pressure_mass], format="csr")

    @cached_property
    def velocity_only_mass(self) -> sp.csr_matrix:
        """[[M_x, 0], [0, 0]]"""
        zero = sp.csr_matrix((self.M_p, self.M_p))
        return sp.block_diag([self.velocity_mass, zero], format="csr")


def dof_counts(mesh: StructuredQuadMesh) -> tuple[int, int]:
    return 2 * (2 * mesh.nx + 1) * (2 * mesh.ny + 1), 3 * mesh.num_cells


def shape_eval(space: VelocitySpace | PressureSpace, cell: int, point: tuple[float, float]) -> ShapeEval:
    """参照点での局所基底の値と物理勾配 (セル Jacobian は対角定数)"""
    if not 0 <= cell < space.mesh.num_cells:
        raise ValueError(f"セル番号が範囲外です: {cell}")
    xhat = np.array([point[0]])
    yhat = np.array([point[1]])
    if isinstance(space, VelocitySpace):
        values, gradients = q2_reference(xhat, yhat)
    else:
        values, gradients = p1disc_reference(xhat, yhat)
    scale = np.array([space.mesh.hx, space.mesh.hy])
    return ShapeEval(values=values[0], gradients=gradients[0] / scale)


def interpolate(
    space: VelocitySpace | PressureSpace,
    function: VectorField | ScalarField,
    t: float,
    quadrature_order: int = DEFAULT_QUADRATURE + 1,
) -> FloatArray:
    """Q2 は節点補間、P1disc はセルごとの L² 射影"""
    if isinstance(space, VelocitySpace):
        x, y = space.node_coordinates
        values = np.asarray(function(x, y, t), dtype=np.float64)
        return values.reshape(2, -1).ravel()

    quadrature = spatial_quadrature(quadrature_order)
    basis, _ = p1disc_reference(quadrature.points[:, 0], quadrature.points[:, 1])
    x0, y0 = space.mesh.cell_origins
    x = x0[:, None] + space.mesh.hx * quadrature.points[None, :, 0]
    y = y0[:, None] + space.mesh.hy * quadrature.points[None, :, 1]
    values = np.asarray(function(x, y, t), dtype=np.float64)
    moments = np.einsum("cq,q,ql->cl", values, quadrature.weights, basis)
    norms = np.einsum("q,ql,ql->l", quadrature.weights, basis, basis)
    return (moments / norms).ravel()


def cell_velocity_coefficients(space: VelocitySpace, coefficients: FloatArray) -> FloatArray:
    """大域速度係数をセル局所 (ncells, 2, 9) に並べ替え"""
    return coefficients[space.cell_dofs].reshape(-1, 2, 9)


def evaluate_velocity(
    space: VelocitySpace, coefficients: FloatArray, cell: int, xhat: FloatArray, yhat: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """セル内参照点での速度 (npts, 2) と勾配 (npts, 2, 2) (勾配 [i, j] = ∂_j v_i)"""
    values, gradients = q2_reference(np.atleast_1d(xhat), np.atleast_1d(yhat))
    gradients = gradients / np.array([space.mesh.hx, space.mesh.hy])
    local = cell_velocity_coefficients(space, coefficients)[cell]
    return (
        np.einsum("pa,ia->pi", values, local),
        np.einsum("paj,ia->pij", gradients, local),
    )


def evaluate_pressure(
    space: PressureSpace, coefficients: FloatArray, cell: int, xhat: FloatArray, yhat: FloatArray
) -> FloatArray:
    values, _ = p1disc_reference(np.atleast_1d(xhat), np.atleast_1d(yhat))
    return values @ coefficients[space.cell_dofs[cell]]


def dirichlet_lifting(space: VelocitySpace, g_dirichlet: VectorField, t: float) -> FloatArray:
    """Dirichlet 境界節点で g_D を補間し、それ以外の節点は 0 とした持ち上げ"""
    lifting = np.zeros(space.num_dofs)
    nodes = space.dirichlet_nodes
    if nodes.size == 0:
        return lifting
    x, y = space.node_coordinates
    values = np.asarray(g_dirichlet(x[nodes], y[nodes], t), dtype=np.float64).reshape(2, -1)
    lifting[nodes] = values[0]
    lifting[space.num_nodes + nodes] = values[1]
    return lifting


def zero_mean_pressure(space: MixedSpace, pressure: FloatArray) -> FloatArray:
    """圧力の平均を 0 にずらす"""
    mode = space.pressure.constant_mode
    mass = space.pressure_mass
    mean = float(mode @ (mass @ pressure)) / float(mode @ (mass @ mode))
    return pressure - mean * mode
