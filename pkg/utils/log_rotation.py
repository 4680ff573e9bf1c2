import configparser
import logging
import os
import re
from datetime import datetime, timedelta
from logging.handlers import TimedRotatingFileHandler

from utils.config_manager import get_bool, get_config_value, get_int, load_config

TRACE_LOGGER_NAME = 'pdeltaflow.trace'
TRACE_FILE_STEM = 'solver_trace'
FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _log_directory(config: configparser.ConfigParser) -> str:
    log_directory = str(get_config_value(config, 'LOGGING', 'log_directory', 'logs'))
    if not os.path.isabs(log_directory):
        project_root = os.path.dirname(os.path.dirname(__file__))
        log_directory = os.path.join(project_root, log_directory)
    return log_directory


def setup_logging(config: configparser.ConfigParser | None = None, verbose: bool = False) -> None:
    if config is None:
        config = load_config()

    try:
        log_directory = _log_directory(config)
        log_retention_days = get_int(config, 'LOGGING', 'log_retention_days', 7)
        project_name = str(get_config_value(config, 'LOGGING', 'project_name', 'pdeltaflow'))
        log_level = str(get_config_value(config, 'LOGGING', 'log_level', 'INFO'))

        os.makedirs(log_directory, exist_ok=True)

        log_file = os.path.join(log_directory, f'{project_name}.log')

        file_handler = TimedRotatingFileHandler(
            filename=log_file,
            when='midnight',
            backupCount=log_retention_days,
            encoding='utf-8'
        )
        file_handler.suffix = "%Y-%m-%d.log"

        formatter = logging.Formatter(FORMAT)
        file_handler.setFormatter(formatter)

        root_logger = logging.getLogger()

        level = getattr(logging, log_level.upper(), None)
        if isinstance(level, int):
            root_logger.setLevel(level)
        else:
            root_logger.setLevel(logging.INFO)
            logging.warning(f"無効なログレベル '{log_level}' が指定されました。INFOを使用します。")

        root_logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler.setLevel(logging.INFO if verbose else logging.WARNING)
        root_logger.addHandler(console_handler)

        cleanup_old_logs(log_directory, log_retention_days, project_name)

        logging.info(f"ログシステムが初期化されました: {log_file}")

    except PermissionError as e:
        raise PermissionError(f"ログディレクトリの作成権限がありません: {e}")
    except Exception as e:
        raise RuntimeError(f"ログ設定の初期化中にエラーが発生しました: {e}")


def _rotated_pattern(base_names: tuple[str, ...]) -> re.Pattern[str]:
    names = '|'.join(re.escape(name) for name in base_names)
    return re.compile(rf'(?:{names})\.log\.\d{{4}}-\d{{2}}-\d{{2}}\.log$')


def cleanup_old_logs(log_directory: str, retention_days: int, project_name: str) -> int:
    """
    保持期間を過ぎたローテーション済みの実行ログと反復トレースを削除する

    現在書き込み中の <project_name>.log と solver_trace.log は残す。

    Returns:
        削除したファイル数
    """
    pattern = _rotated_pattern((project_name, TRACE_FILE_STEM))
    expiry = datetime.now() - timedelta(days=retention_days)
    deleted = 0
    try:
        candidates = [name for name in os.listdir(log_directory) if pattern.match(name)]
    except OSError as e:
        logging.error(f"ソルバーログの整理に失敗しました ({log_directory}): {e}")
        return 0

    for filename in candidates:
        file_path = os.path.join(log_directory, filename)
        try:
            if datetime.fromtimestamp(os.path.getmtime(file_path)) <= expiry:
                os.remove(file_path)
                logging.debug(f"保持期間 {retention_days} 日を過ぎたソルバーログを削除しました: {filename}")
                deleted += 1
        except OSError as e:
            logging.error(f"ソルバーログ {filename} を削除できませんでした: {e}")

    if deleted:
        logging.info(f"{project_name} の古い実行ログ・反復トレースを {deleted} 件削除しました")
    return deleted


def setup_solver_trace(config: configparser.ConfigParser | None = None) -> logging.Logger | None:
    """debug_mode のとき Newton/Krylov の反復を solver_trace.log に書くロガーを返す"""
    if config is None:
        config = load_config()

    try:
        if not get_bool(config, 'LOGGING', 'debug_mode', False):
            return None

        log_directory = _log_directory(config)
        os.makedirs(log_directory, exist_ok=True)

        trace_logger = logging.getLogger(TRACE_LOGGER_NAME)
        trace_logger.setLevel(logging.DEBUG)

        trace_log_path = os.path.join(log_directory, f'{TRACE_FILE_STEM}.log')
        trace_handler = TimedRotatingFileHandler(
            filename=trace_log_path,
            when='midnight',
            backupCount=get_int(config, 'LOGGING', 'log_retention_days', 7),
            encoding='utf-8'
        )
        trace_handler.suffix = "%Y-%m-%d.log"
        trace_handler.setFormatter(logging.Formatter(FORMAT))
        trace_logger.addHandler(trace_handler)
        trace_logger.propagate = False

        logging.info(f"反復トレースが有効化されました: {trace_log_path}")
        return trace_logger

    except Exception as e:
        logging.error(f"反復トレース設定中にエラーが発生しました: {str(e)}")
        return None
