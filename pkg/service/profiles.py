import csv
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, fields

import numpy as np

from service.constitutive import FloatArray

logger = logging.getLogger(__name__)

RECORD_COLUMNS = {
    "p": "p",
    "delta": "delta",
    "nu": "nu",
    "nu_inf": "nu_inf",
    "cells": "cells",
    "steps": "steps",
    "solver": "solver",
    "success": "success",
    "work": "W",
    "mean_nnl": "mean_nNL",
    "max_nnl": "max_nNL",
    "mean_nl": "mean_nL",
    "max_nl": "max_nL",
    "e_phi": "e_phi",
    "e_div": "e_div",
    "wall_s": "wall_s",
    "n_dof": "N_dof",
    "n_slabs": "n_slabs",
    "total_nl": "total_nL",
}

InstanceKey = tuple[float, float, float, float, int, int]


@dataclass(frozen=True)
class RunRecord:
    """1 インスタンス × 1 ソルバーの実行結果"""

    p: float
    delta: float
    nu: float
    nu_inf: float
    cells: int
    steps: int
    solver: str
    success: bool
    work: int = 0
    mean_nnl: float = math.nan
    max_nnl: int = 0
    mean_nl: float = math.nan
    max_nl: int = 0
    e_phi: float = math.nan
    e_div: float = math.nan
    wall_s: float = 0.0
    n_dof: int = 0
    n_slabs: int = 0
    total_nl: int = 0

    def __post_init__(self) -> None:
        if self.work < 0:
            raise ValueError(f"work は 0 以上である必要があります: {self.work}")

    @property
    def instance(self) -> InstanceKey:
        return (self.p, self.delta, self.nu, self.nu_inf, self.cells, self.steps)


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        return f"{value:.16e}"
    return str(value)


def write_records(path: str, records: Iterable[RunRecord]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(RECORD_COLUMNS.values()))
        writer.writeheader()
        for record in records:
            writer.writerow({
                column: format_value(getattr(record, name)) for name, column in RECORD_COLUMNS.items()
            })


def _parse(name: str, text: str) -> object:
    kind = {f.name: f.type for f in fields(RunRecord)}[name]
    if kind in (bool, "bool"):
        if text not in ("True", "False"):
            raise ValueError(f"success 列の値が不正です: {text}")
        return text == "True"
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def read_records(path: str) -> list[RunRecord]:
    """
    records.csv を読み込む

    Raises:
        FileNotFoundError: ファイルが存在しない
        ValueError: 必須列の欠落や値の変換に失敗
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [column for column in RECORD_COLUMNS.values() if column not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"records.csv に必要な列がありません: {', '.join(missing)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                values = {name: _parse(name, row[column]) for name, column in RECORD_COLUMNS.items()}
            except ValueError as e:
                raise ValueError(f"{path} の {line} 行目を解釈できません: {e}") from e
            records.append(RunRecord(**values))  # type: ignore[arg-type]
    logger.info(f"{len(records)} 件の実行記録を読み込みました: {path}")
    return records


@dataclass(frozen=True)
class ProfileTable:
    """
    ソルバーごとの性能プロファイル π_s(τ)

    ratios は (インスタンス数, ソルバー数)。失敗は inf。
    """

    solvers: tuple[str, ...]
    instances: tuple[InstanceKey, ...]
    ratios: FloatArray
    taus: FloatArray
    values: FloatArray

    def profile(self, solver: str) -> FloatArray:
        return self.values[:, self.solvers.index(solver)]

    def at(self, solver: str, tau: float) -> float:
        column = self.ratios[:, self.solvers.index(solver)]
        return float(np.count_nonzero(column <= tau)) / len(self.instances)

    def success_fraction(self, solver: str) -> float:
        return self.at(solver, math.inf)


def performance_ratios(
    records: Sequence[RunRecord],
) -> tuple[tuple[str, ...], tuple[InstanceKey, ...], FloatArray]:
    """r_{i,s} = W_{i,s} / min_s' W_{i,s'}。失敗と欠測は inf"""
    solvers = tuple(sorted({record.solver for record in records}))
    instances = tuple(sorted({record.instance for record in records}))
    work = np.full((len(instances), len(solvers)), np.inf)
    row = {key: i for i, key in enumerate(instances)}
    for record in records:
        if record.success:
            work[row[record.instance], solvers.index(record.solver)] = float(record.work)

    ratios = np.full_like(work, np.inf)
    for i, line in enumerate(work):
        best = np.min(line)
        if not np.isfinite(best):
            continue
        if best == 0.0:
            ratios[i] = np.where(line == 0.0, 1.0, np.inf)
        else:
            ratios[i] = line / best
    return solvers, instances, ratios


def dolan_more(records: Sequence[RunRecord], tau_grid: Sequence[float] | FloatArray | None = None) -> ProfileTable:
    """
    Dolan-Moré 性能プロファイル

    全ソルバーが失敗したインスタンスも分母に含め、比は inf とする。

    Args:
        records: 実行記録
        tau_grid: τ の標本点。省略時は 1 から最大有限比までの対数等間隔

    Returns:
        ProfileTable

    Raises:
        ValueError: 記録が空
    """
    if not records:
        raise ValueError("性能プロファイルを計算する実行記録がありません")
    solvers, instances, ratios = performance_ratios(records)
    if tau_grid is None:
        finite = ratios[np.isfinite(ratios)]
        largest = float(finite.max()) if finite.size else 1.0
        taus = np.geomspace(1.0, largest, 50) if largest > 1.0 else np.array([1.0])
    else:
        taus = np.asarray(sorted(tau_grid), dtype=np.float64)
    values = np.mean(ratios[None, :, :] <= taus[:, None, None], axis=1)
    return ProfileTable(solvers=solvers, instances=instances, ratios=ratios, taus=taus, values=values)


def write_profile_csv(path: str, table: ProfileTable) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", *table.solvers])
        for tau, row in zip(table.taus, table.values):
            writer.writerow([format_value(float(tau)), *(format_value(float(value)) for value in row)])
