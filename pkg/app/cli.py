import argparse
import configparser
import logging
import os
import sys
from collections.abc import Sequence

import numpy as np

from app import __version__
from service.constitutive import TangentKind
from service.experiments import (
    Settings,
    patch_report,
    quadcheck_rows,
    run_convergence,
    run_history,
    run_sweep,
    sweep_instances,
    tangent_spectrum_rows,
    write_convergence_csv,
    write_history_csv,
    write_patch_csv,
    write_quadcheck_csv,
    write_spectrum_csv,
)
from service.profiles import dolan_more, read_records, write_profile_csv, write_records
from utils.config_manager import build_settings, get_bool, get_config_value, get_int, load_config
from utils.log_rotation import setup_logging, setup_solver_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

VARIANT_CHOICES = [str(kind) for kind in TangentKind]


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config', help='設定ファイル (既定: utils/config.ini)')
    parser.add_argument('--out', help='出力 CSV のパス')
    parser.add_argument('--verbose', action='store_true', help='進捗をコンソールに表示する')
    return parser


def _model_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--p', type=float)
    parser.add_argument('--delta', type=float)
    parser.add_argument('--nu', type=float)
    parser.add_argument('--nu-inf', dest='nu_inf', type=float)
    parser.add_argument('--variant', choices=VARIANT_CHOICES)
    parser.add_argument('--sigma-max', dest='sigma_max', type=float)
    return parser


def _discretization_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--cells', type=int, help='1 方向のセル数')
    parser.add_argument('--degree', type=int, help='時間方向の次数 k')
    parser.add_argument('--steps', type=int, help='時間ステップ数 (0 ならセル数)')
    parser.add_argument('--gamma1', type=float)
    parser.add_argument('--gamma2', type=float)
    parser.add_argument('--gamma-cip', dest='gamma_cip', type=float)
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    model = _model_parser()
    discretization = _discretization_parser()

    parser = argparse.ArgumentParser(prog='pdeltaflow', description='(p,δ)-Navier-Stokes 時空間ソルバーの実験ツール')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    convergence = commands.add_parser(
        'convergence', parents=[common, model, discretization], help='解析解で誤差と eoc を求める'
    )
    convergence.add_argument('--levels', type=int, default=3)
    convergence.add_argument('--base-cells', dest='base_cells', type=int)

    sweep = commands.add_parser(
        'sweep', parents=[common, model, discretization], help='パラメータ格子を解いて実行記録を出力する'
    )
    sweep.add_argument('--cells-list', dest='cells_list', type=int, nargs='+', default=[2, 4, 8])
    sweep.add_argument('--variants', nargs='+', choices=VARIANT_CHOICES, default=VARIANT_CHOICES)
    sweep.add_argument('--full-grid', dest='full_grid', action='store_true', default=None)
    sweep.add_argument('--max-workers', dest='max_workers', type=int)

    profile = commands.add_parser('profile', parents=[common], help='実行記録から性能プロファイルを作る')
    profile.add_argument('--in', dest='input', required=True, help='records.csv')
    profile.add_argument('--tau', type=float, nargs='+')

    spectrum = commands.add_parser('tangent-spectrum', parents=[common, model], help='接線の固有値を出力する')
    spectrum.add_argument('--points', type=int, default=25)
    spectrum.add_argument('--min-norm', dest='min_norm', type=float, default=1e-6)
    spectrum.add_argument('--max-norm', dest='max_norm', type=float, default=1e6)

    quadcheck = commands.add_parser('quadcheck', parents=[common], help='Gauss-Radau 則の欠損次数を調べる')
    quadcheck.add_argument('--degrees', type=int, nargs='+', default=[0, 1, 2, 3, 4])
    quadcheck.add_argument('--taus', type=float, nargs='+', default=[0.5, 0.25, 0.125, 0.0625])

    history = commands.add_parser(
        'history', parents=[common, model, discretization], help='スラブごとの反復数の履歴を出力する'
    )
    history.add_argument('--variants', nargs='+', choices=VARIANT_CHOICES, default=VARIANT_CHOICES)

    patches = commands.add_parser(
        'patch-report', parents=[common, model, discretization], help='代理パッチの摂動量を出力する'
    )
    patches.add_argument('--tau', type=float, required=True)
    patches.add_argument('--t0', type=float, default=0.25)

    return parser


def _overrides(args: argparse.Namespace) -> dict[str, float | int | str | None]:
    keys = ('p', 'delta', 'nu', 'nu_inf', 'variant', 'sigma_max',
            'cells', 'degree', 'steps', 'gamma1', 'gamma2', 'gamma_cip')
    return {key: getattr(args, key, None) for key in keys}


def _output_path(args: argparse.Namespace, config: configparser.ConfigParser, default_name: str) -> str:
    if args.out:
        return args.out
    directory = str(get_config_value(config, 'BENCH', 'output_directory', 'results'))
    return os.path.join(directory, default_name)


def _convergence(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'convergence.csv')
    rows = run_convergence(
        settings, args.levels, args.base_cells or settings.cells,
        progress_callback=logger.info, trace=setup_solver_trace(config),
    )
    write_convergence_csv(path, rows)
    return path


def _sweep(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'records.csv')
    full_grid = args.full_grid if args.full_grid is not None else get_bool(config, 'BENCH', 'full_grid', False)
    max_workers = args.max_workers or get_int(config, 'BENCH', 'max_workers', 0) or None
    instances = sweep_instances(args.cells_list, [TangentKind(name) for name in args.variants], full_grid)
    records = run_sweep(
        settings, instances, max_workers, progress_callback=logger.info, trace=setup_solver_trace(config)
    )
    write_records(path, records)
    return path


def _profile(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'profile.csv')
    table = dolan_more(read_records(args.input), args.tau)
    write_profile_csv(path, table)
    for solver in table.solvers:
        logger.info(f"{solver}: 成功率 {table.success_fraction(solver):.3f}")
    return path


def _tangent_spectrum(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    if args.points < 1 or args.min_norm <= 0.0 or args.max_norm < args.min_norm:
        raise ValueError(
            f"|A| の範囲が不正です: points={args.points}, min={args.min_norm}, max={args.max_norm}"
        )
    kind = TangentKind(args.variant) if args.variant else TangentKind.EXN
    path = _output_path(args, config, 'tangent_spectrum.csv')
    magnitudes = np.geomspace(args.min_norm, args.max_norm, args.points)
    write_spectrum_csv(path, tangent_spectrum_rows(settings.params, settings.variant(kind), magnitudes))
    return path


def _quadcheck(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'quadcheck.csv')
    write_quadcheck_csv(path, quadcheck_rows(args.degrees, args.taus))
    return path


def _history(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'history.csv')
    rows = run_history(
        settings, settings.cells, [TangentKind(name) for name in args.variants],
        progress_callback=logger.info, trace=setup_solver_trace(config),
    )
    write_history_csv(path, rows)
    return path


def _patch_report(args: argparse.Namespace, config: configparser.ConfigParser, settings: Settings) -> str:
    path = _output_path(args, config, 'patch_report.csv')
    write_patch_csv(path, patch_report(settings, settings.cells, args.tau, args.t0))
    return path


COMMANDS = {
    'convergence': _convergence,
    'sweep': _sweep,
    'profile': _profile,
    'tangent-spectrum': _tangent_spectrum,
    'quadcheck': _quadcheck,
    'history': _history,
    'patch-report': _patch_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    """
    コマンドラインの入口

    Returns:
        終了コード (0: 成功, 1: 実行時エラー, 2: 設定・入出力エラー)
    """
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        setup_logging(config, verbose=args.verbose)
        settings = build_settings(config, _overrides(args))
    except (OSError, configparser.Error, ValueError) as e:
        print(f"設定エラー: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        path = COMMANDS[args.command](args, config, settings)
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} の入出力または設定でエラーが発生しました: {e}")
        print(f"設定エラー: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        logger.error(f"{args.command} の実行中にエラーが発生しました: {e}")
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"{args.command} の実行中に予期しないエラーが発生しました: {e}")
        print(f"エラー: 処理中にエラーが発生しました: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    print(path)
    return EXIT_OK
