from typing import Any

import numpy as np


class ConstitutiveDomainError(ValueError):
    """応力則の定義域外 (δ = 0 での微分など)"""


class KrylovError(RuntimeError):
    """FGMRES が最大反復数以内に収束しなかった"""

    def __init__(
        self,
        message: str,
        iterations: int,
        residual_norm: float,
        rhs_norm: float | None = None,
        solution: np.ndarray | None = None,
    ):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm
        self.rhs_norm = rhs_norm
        self.solution = solution

    @property
    def relative_residual(self) -> float | None:
        if not self.rhs_norm:
            return None
        return self.residual_norm / self.rhs_norm


class SingularPatchError(RuntimeError):
    """Vanka パッチ行列が特異"""

    def __init__(self, message: str, level: int, cell: int):
        super().__init__(message)
        self.level = level
        self.cell = cell


class SlabSolveError(RuntimeError):
    """
    タイムスラブの非線形求解に失敗

    reason は "line_search", "max_iterations", "krylov" のいずれか。
    slab_index は march が埋める。
    """

    def __init__(
        self,
        message: str,
        reason: str,
        stats: Any = None,
        slab_index: int | None = None,
    ):
        super().__init__(message)
        self.reason = reason
        self.stats = stats
        self.slab_index = slab_index
