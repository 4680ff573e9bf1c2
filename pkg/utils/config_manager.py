import configparser
import os
from collections.abc import Mapping

from service.constitutive import ModelParams, TangentKind, TangentVariant
from service.experiments import Settings
from service.forms import DiscretizationConfig
from service.krylov import KrylovConfig
from service.multigrid import CoarseMode, MgConfig
from service.newton import ArmijoConfig, ForcingConfig, NewtonConfig


def get_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), 'config.ini')


CONFIG_PATH = get_config_path()


def load_config(path: str | None = None) -> configparser.ConfigParser:
    config_path = path or CONFIG_PATH
    config = configparser.ConfigParser()
    try:
        with open(config_path, encoding='utf-8') as f:
            config.read_file(f)
    except FileNotFoundError:
        print(f"設定ファイルが見つかりません: {config_path}")
        raise
    except configparser.Error as e:
        print(f"設定ファイルの解析中にエラーが発生しました: {e}")
        raise
    return config


def get_config_value(
    config: configparser.ConfigParser,
    section: str,
    key: str,
    default: str | int | float | bool | None = None,
) -> str | int | float | bool | None:
    try:
        return config.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError):
        return default


def get_float(config: configparser.ConfigParser, section: str, key: str, default: float) -> float:
    value = get_config_value(config, section, key, default)
    try:
        return float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValueError(f"[{section}] {key} は数値で指定してください: {value}")


def get_int(config: configparser.ConfigParser, section: str, key: str, default: int) -> int:
    value = get_config_value(config, section, key, default)
    try:
        return int(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValueError(f"[{section}] {key} は整数で指定してください: {value}")


def get_bool(config: configparser.ConfigParser, section: str, key: str, default: bool) -> bool:
    value = get_config_value(config, section, key, default)
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'yes', 'true', 'on'):
        return True
    if text in ('0', 'no', 'false', 'off'):
        return False
    raise ValueError(f"[{section}] {key} は True/False で指定してください: {value}")


def _optional_float(config: configparser.ConfigParser, section: str, key: str) -> float | None:
    value = get_config_value(config, section, key, None)
    if value is None or str(value).strip() == '':
        return None
    return get_float(config, section, key, 0.0)


Override = float | int | str | None


def build_settings(
    config: configparser.ConfigParser,
    overrides: Mapping[str, Override] | None = None,
) -> Settings:
    """
    設定ファイルとコマンドライン引数から実験設定を組み立てる

    overrides の値が None でない項目は設定ファイルより優先する。

    Raises:
        ValueError: 値の変換や検証に失敗
    """
    given = {key: value for key, value in (overrides or {}).items() if value is not None}

    def pick_float(key: str, fallback: float) -> float:
        return float(given[key]) if key in given else fallback  # type: ignore[arg-type]

    def pick_int(key: str, fallback: int) -> int:
        return int(given[key]) if key in given else fallback  # type: ignore[arg-type]

    params = ModelParams(
        p=pick_float('p', get_float(config, 'MODEL', 'p', 1.5)),
        delta=pick_float('delta', get_float(config, 'MODEL', 'delta', 1e-5)),
        nu=pick_float('nu', get_float(config, 'MODEL', 'nu', 1e-2)),
        nu_inf=pick_float('nu_inf', get_float(config, 'MODEL', 'nu_inf', 0.0)),
    )
    discretization = DiscretizationConfig(
        gamma1=pick_float('gamma1', get_float(config, 'DISCRETIZATION', 'gamma1', 1e3)),
        gamma2=pick_float('gamma2', get_float(config, 'DISCRETIZATION', 'gamma2', 1e3)),
        gamma_cip=pick_float('gamma_cip', get_float(config, 'DISCRETIZATION', 'gamma_cip', 1.0)),
        convection=get_bool(config, 'DISCRETIZATION', 'convection', True),
        picard_oseen=get_bool(config, 'DISCRETIZATION', 'picard_oseen', False),
    )

    variant_name = str(given.get('variant', get_config_value(config, 'NEWTON', 'variant', 'modn'))).lower()
    try:
        kind = TangentKind(variant_name)
    except ValueError:
        raise ValueError(f"[NEWTON] variant は pic, exn, modn のいずれかで指定してください: {variant_name}")
    sigma_max = _optional_float(config, 'NEWTON', 'sigma_max')
    if 'sigma_max' in given:
        sigma_max = pick_float('sigma_max', 0.0)
    newton = NewtonConfig(
        variant=TangentVariant(kind, sigma_max),
        abs_tol=get_float(config, 'NEWTON', 'abs_tol', 1e-12),
        rel_tol=get_float(config, 'NEWTON', 'rel_tol', 1e-10),
        max_nonlinear=get_int(config, 'NEWTON', 'max_nonlinear', 50),
        armijo=ArmijoConfig(
            c1=get_float(config, 'NEWTON', 'armijo_c1', 1e-4),
            backtrack=get_float(config, 'NEWTON', 'armijo_backtrack', 0.5),
            min_step=get_float(config, 'NEWTON', 'armijo_min_step', 2.0**-10),
        ),
        forcing=ForcingConfig(
            eta0=get_float(config, 'NEWTON', 'eta0', 1e-2),
            exponent=get_float(config, 'NEWTON', 'ew_exponent', 2.0),
            gamma=get_float(config, 'NEWTON', 'ew_gamma', 0.9),
            eta_max=get_float(config, 'NEWTON', 'eta_max', 0.9),
        ),
        picard_fixed_tol=get_float(config, 'NEWTON', 'picard_tol', 1e-4),
    )
    krylov = KrylovConfig(
        restart=get_int(config, 'KRYLOV', 'restart', 60),
        max_iterations=get_int(config, 'KRYLOV', 'max_iterations', 300),
    )

    coarse_mode_name = str(get_config_value(config, 'MULTIGRID', 'coarse_mode', 'galerkin')).lower()
    try:
        coarse_mode = CoarseMode(coarse_mode_name)
    except ValueError:
        raise ValueError(
            f"[MULTIGRID] coarse_mode は galerkin か rediscretize で指定してください: {coarse_mode_name}"
        )
    mg = MgConfig(
        coarse_cells=get_int(config, 'MULTIGRID', 'coarse_cells', 4),
        pre_smooth=get_int(config, 'MULTIGRID', 'pre_smooth', 2),
        post_smooth=get_int(config, 'MULTIGRID', 'post_smooth', 2),
        omega=get_float(config, 'MULTIGRID', 'omega', 0.7),
        surrogate=get_bool(config, 'MULTIGRID', 'surrogate', True),
        coarse_mode=coarse_mode,
        rebuild_ratio=get_float(config, 'MULTIGRID', 'rebuild_ratio', 0.9),
        rebuild_factor=get_float(config, 'MULTIGRID', 'rebuild_factor', 2.0),
    )

    return Settings(
        params=params,
        discretization=discretization,
        newton=newton,
        krylov=krylov,
        mg=mg,
        degree=pick_int('degree', get_int(config, 'DISCRETIZATION', 'degree', 1)),
        end_time=get_float(config, 'DISCRETIZATION', 'end_time', 1.0),
        quadrature=get_int(config, 'DISCRETIZATION', 'quadrature', 4),
        cells=pick_int('cells', get_int(config, 'DISCRETIZATION', 'cells', 4)),
        steps=pick_int('steps', get_int(config, 'DISCRETIZATION', 'steps', 0)),
    )
