"""
解析解テストの公表値

誤差は単位正方形、終端時刻 T = 1、h = 2⁻² … 2⁻⁷ の順。
反復数は ν = 1e-3, δ = 1e-5 での 1 時間ステップあたり平均非線形反復数で、
None は非収束を表す。
"""
from dataclasses import dataclass

REFERENCE_H = (2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7)
ITERATION_CELLS = (16, 64, 256, 1024, 4096, 16384, 65536, 262144)


@dataclass(frozen=True)
class ReferenceErrors:
    p: float
    delta: float
    nu: float
    nu_inf: float
    e_phi: tuple[float, ...]
    e_div: tuple[float, ...]


REFERENCE_ERRORS = (
    ReferenceErrors(
        p=1.5, delta=1e-15, nu=1e-2, nu_inf=0.0,
        e_phi=(4.87470e-01, 1.90222e-01, 8.41645e-02, 4.00681e-02, 1.92389e-02, 8.33996e-03),
        e_div=(2.9097e-01, 6.4618e-02, 1.0454e-02, 1.5706e-03, 2.6846e-04, 5.6162e-05),
    ),
    ReferenceErrors(
        p=1.25, delta=1e-5, nu=1e-2, nu_inf=0.0,
        e_phi=(4.48403e-01, 1.78193e-01, 7.59268e-02, 3.37933e-02, 1.49391e-02, 6.60254e-03),
        e_div=(2.6211e-01, 6.6096e-02, 1.1344e-02, 1.7076e-03, 2.8323e-04, 5.5898e-05),
    ),
    ReferenceErrors(
        p=1.5, delta=1e-15, nu=1e-2, nu_inf=1e-5,
        e_phi=(4.87269e-01, 1.90169e-01, 8.41497e-02, 4.00616e-02, 1.92355e-02, 8.33866e-03),
        e_div=(2.9073e-01, 6.4554e-02, 1.0443e-02, 1.5692e-03, 2.6832e-04, 5.6155e-05),
    ),
    ReferenceErrors(
        p=1.25, delta=1e-5, nu=1e-2, nu_inf=1e-5,
        e_phi=(4.48239e-01, 1.78137e-01, 7.59129e-02, 3.37881e-02, 1.49369e-02, 6.59242e-03),
        e_div=(2.6191e-01, 6.6026e-02, 1.1330e-02, 1.7057e-03, 2.8304e-04, 5.5903e-05),
    ),
)

_NONE8 = (None,) * 8

REFERENCE_ITERATIONS: dict[tuple[float, str], tuple[float | None, ...]] = {
    (1.5, "pic"): (4.00, 4.44, 3.03, 3.02, 3.12, 3.03, 3.05, 4.02),
    (1.5, "exn"): (8.12, 8.81, 8.06, 10.48, 13.25, 18.50, 24.57, 28.48),
    (1.5, "modn"): (8.00, 7.62, 5.78, 5.53, 5.26, 4.79, 4.58, 4.16),
    (1.33, "pic"): (7.38, 7.94, 6.38, 5.81, 5.39, 4.93, 4.86, 5.55),
    (1.33, "exn"): (8.75, 11.12, 14.69, 27.17, 21.84, 13.82, 11.20, 10.05),
    (1.33, "modn"): (7.12, 7.81, 6.19, 5.56, 5.19, 4.80, 4.80, 5.00),
    (1.25, "pic"): (7.62, 7.75, 6.38, 5.67, 5.16, 5.14, 5.09, 5.61),
    (1.25, "exn"): (10.88, 12.88, 22.56, 19.11, 15.38, 13.73, 12.77, 11.94),
    (1.25, "modn"): (7.75, 7.15, 5.62, 5.16, 5.06, 4.52, 4.79, 5.07),
    (1.2, "pic"): (7.00, 7.75, 6.31, 5.69, 5.10, 4.92, 5.27, 5.53),
    (1.2, "exn"): _NONE8,
    (1.2, "modn"): (7.25, 7.69, 6.28, 5.69, 5.10, 4.92, 4.77, 5.25),
    (1.16, "pic"): _NONE8,
    (1.16, "exn"): _NONE8,
    (1.16, "modn"): (7.38, 7.69, 6.28, 5.66, 5.11, 4.77, 4.96, 7.21),
}

FULL_GRID = {
    "p": (1.16, 1.2, 1.25, 1.33, 1.5, 1.66),
    "delta": (1e-5, 1e-10, 1e-15, 1e-20),
    "nu": (1e-1, 1e-2, 1e-3),
    "nu_inf": (1e-5, 0.0),
}

DESK_GRID = {
    "p": (1.25, 1.5),
    "delta": (1e-5, 1e-10),
    "nu": (1e-2, 1e-3),
    "nu_inf": (0.0, 1e-5),
}


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-12 * max(abs(a), abs(b), 1e-300)


def reference_errors(p: float, delta: float, nu: float, nu_inf: float) -> ReferenceErrors | None:
    for entry in REFERENCE_ERRORS:
        if (_close(entry.p, p) and _close(entry.delta, delta)
                and _close(entry.nu, nu) and entry.nu_inf == nu_inf):
            return entry
    return None


def reference_error_at(entry: ReferenceErrors, h: float) -> tuple[float, float] | None:
    for level, reference_h in enumerate(REFERENCE_H):
        if _close(reference_h, h):
            return entry.e_phi[level], entry.e_div[level]
    return None


def reference_iterations(p: float, variant: str, cells: int) -> float | None:
    """公表された平均非線形反復数。表にない組や非収束は None"""
    counts = REFERENCE_ITERATIONS.get((round(p, 2), variant))
    if counts is None or cells not in ITERATION_CELLS:
        return None
    return counts[ITERATION_CELLS.index(cells)]
