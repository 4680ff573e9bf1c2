from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import StrEnum
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

IntArray = NDArray[np.int64]


class BoundaryTag(StrEnum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


class FaceKind(StrEnum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"


class Side(StrEnum):
    """セルの辺。外向き法線の向きで区別する"""

    LEFT = "left"
    RIGHT = "right"
    BOTTOM = "bottom"
    TOP = "top"


SIDE_NORMALS: dict[Side, tuple[float, float]] = {
    Side.LEFT: (-1.0, 0.0),
    Side.RIGHT: (1.0, 0.0),
    Side.BOTTOM: (0.0, -1.0),
    Side.TOP: (0.0, 1.0),
}


@dataclass(frozen=True)
class Face:
    kind: FaceKind
    cells: tuple[int, ...]
    normal: tuple[float, float]
    diameter: float
    midpoint: tuple[float, float]
    side: Side | None = None
    tag: BoundaryTag | None = None


BoundaryRule = Callable[[Face], BoundaryTag]


def all_dirichlet(face: Face) -> BoundaryTag:
    return BoundaryTag.DIRICHLET


@dataclass(frozen=True)
class StructuredQuadMesh:
    """
    矩形領域の一様構造四角形メッシュ

    セル番号は x 方向が速い辞書式順序 c = j*nx + i。
    """

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0
    level: int = 0
    boundary_rule: BoundaryRule = field(default=all_dirichlet, compare=False)

    def __post_init__(self) -> None:
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"セル数は 1 以上で指定してください: nx={self.nx}, ny={self.ny}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(
                f"領域の範囲が不正です: ({self.x0}, {self.y0}) - ({self.x1}, {self.y1})"
            )

    @property
    def num_cells(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    @cached_property
    def cell_ij(self) -> tuple[IntArray, IntArray]:
        cells = np.arange(self.num_cells)
        return cells % self.nx, cells // self.nx

    @cached_property
    def cell_origins(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        i, j = self.cell_ij
        return self.x0 + i * self.hx, self.y0 + j * self.hy

    def cell_centroid(self, cell: int) -> tuple[float, float]:
        i, j = cell % self.nx, cell // self.nx
        return self.x0 + (i + 0.5) * self.hx, self.y0 + (j + 0.5) * self.hy

    @cached_property
    def faces(self) -> tuple[Face, ...]:
        """内部面 (下位セルからの法線) と境界面 (外向き法線) を列挙"""
        faces: list[Face] = []
        for j in range(self.ny):
            for i in range(1, self.nx):
                faces.append(Face(
                    kind=FaceKind.INTERIOR,
                    cells=(self.cell_index(i - 1, j), self.cell_index(i, j)),
                    normal=(1.0, 0.0),
                    diameter=self.hy,
                    midpoint=(self.x0 + i * self.hx, self.y0 + (j + 0.5) * self.hy),
                ))
        for j in range(1, self.ny):
            for i in range(self.nx):
                faces.append(Face(
                    kind=FaceKind.INTERIOR,
                    cells=(self.cell_index(i, j - 1), self.cell_index(i, j)),
                    normal=(0.0, 1.0),
                    diameter=self.hx,
                    midpoint=(self.x0 + (i + 0.5) * self.hx, self.y0 + j * self.hy),
                ))
        for side, cells, diameter, midpoints in self._boundary_layout():
            for cell, midpoint in zip(cells, midpoints):
                face = Face(
                    kind=FaceKind.BOUNDARY,
                    cells=(cell,),
                    normal=SIDE_NORMALS[side],
                    diameter=diameter,
                    midpoint=midpoint,
                    side=side,
                )
                faces.append(replace(face, tag=self.boundary_rule(face)))
        return tuple(faces)

    def _boundary_layout(self):
        xs = [self.x0 + (i + 0.5) * self.hx for i in range(self.nx)]
        ys = [self.y0 + (j + 0.5) * self.hy for j in range(self.ny)]
        yield (Side.LEFT, [self.cell_index(0, j) for j in range(self.ny)], self.hy,
               [(self.x0, y) for y in ys])
        yield (Side.RIGHT, [self.cell_index(self.nx - 1, j) for j in range(self.ny)], self.hy,
               [(self.x1, y) for y in ys])
        yield (Side.BOTTOM, [self.cell_index(i, 0) for i in range(self.nx)], self.hx,
               [(x, self.y0) for x in xs])
        yield (Side.TOP, [self.cell_index(i, self.ny - 1) for i in range(self.nx)], self.hx,
               [(x, self.y1) for x in xs])

    @property
    def interior_faces(self) -> list[Face]:
        return [f for f in self.faces if f.kind == FaceKind.INTERIOR]

    @property
    def boundary_faces(self) -> list[Face]:
        return [f for f in self.faces if f.kind == FaceKind.BOUNDARY]

    def tag_counts(self) -> Counter[BoundaryTag]:
        return Counter(f.tag for f in self.boundary_faces if f.tag is not None)

    @property
    def has_neumann(self) -> bool:
        return self.tag_counts()[BoundaryTag.NEUMANN] > 0


def uniform_mesh(
    nx: int,
    ny: int,
    extents: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
) -> StructuredQuadMesh:
    x0, y0, x1, y1 = extents
    return StructuredQuadMesh(nx=nx, ny=ny, x0=x0, y0=y0, x1=x1, y1=y1)


def boundary_tag_assign(mesh: StructuredQuadMesh, rule: BoundaryRule) -> StructuredQuadMesh:
    """境界面ごとの判定関数でタグ付けしたメッシュを返す (細分化後も引き継がれる)"""
    return replace(mesh, boundary_rule=rule)


def right_edge_neumann(mesh: StructuredQuadMesh) -> BoundaryRule:
    def rule(face: Face) -> BoundaryTag:
        if face.side == Side.RIGHT and abs(face.midpoint[0] - mesh.x1) < 1e-12 * (mesh.x1 - mesh.x0):
            return BoundaryTag.NEUMANN
        return BoundaryTag.DIRICHLET
    return rule


def refine(mesh: StructuredQuadMesh) -> tuple[StructuredQuadMesh, IntArray]:
    """nx, ny を倍にし、細セルごとの親セル番号を返す"""
    fine = replace(mesh, nx=2 * mesh.nx, ny=2 * mesh.ny, level=mesh.level + 1)
    i, j = fine.cell_ij
    parents = (j // 2) * mesh.nx + (i // 2)
    return fine, parents.astype(np.int64)


@dataclass(frozen=True)
class MeshHierarchy:
    """粗→細の順に並んだメッシュ列と親子対応"""

    levels: tuple[StructuredQuadMesh, ...]
    parents: tuple[IntArray, ...]

    @property
    def finest(self) -> StructuredQuadMesh:
        return self.levels[-1]

    @property
    def coarsest(self) -> StructuredQuadMesh:
        return self.levels[0]


def build_hierarchy(fine: StructuredQuadMesh, coarse_cells: int) -> MeshHierarchy:
    """
    細メッシュから粗メッシュへ nx が coarse_cells 以下になるまで遡って階層を作る

    細メッシュが粗メッシュ 1 段とならない場合は単一レベル。
    """
    num_coarsenings = 0
    nx, ny = fine.nx, fine.ny
    while nx % 2 == 0 and ny % 2 == 0 and nx // 2 >= coarse_cells and ny // 2 >= coarse_cells:
        nx //= 2
        ny //= 2
        num_coarsenings += 1

    coarse = replace(fine, nx=nx, ny=ny, level=0)
    levels = [coarse]
    parents: list[IntArray] = []
    for _ in range(num_coarsenings):
        finer, parent_map = refine(levels[-1])
        levels.append(finer)
        parents.append(parent_map)
    return MeshHierarchy(levels=tuple(levels), parents=tuple(parents))
