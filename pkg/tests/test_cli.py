import csv
from unittest.mock import patch

import pytest

from app import __version__
from app.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main
from service.profiles import RunRecord, write_records


def read_csv(path):
    with open(path, encoding='utf-8') as f:
        return list(csv.reader(f))


def record(solver, work, cells=16):
    return RunRecord(p=1.5, delta=1e-5, nu=1e-2, nu_inf=0.0, cells=cells, steps=4,
                     solver=solver, success=work > 0, work=work)


class TestParser:
    """build_parser関数のテスト"""

    def test_version(self, capsys):
        """--version で版数を表示して終了する"""
        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args(['--version'])
        assert exc_info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_command_required(self):
        """サブコマンドがなければ終了する"""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_model_options(self):
        """モデル引数は属性名に変換される"""
        args = build_parser().parse_args(['convergence', '--nu-inf', '1e-5', '--variant', 'exn', '--levels', '2'])
        assert args.nu_inf == 1e-5
        assert args.variant == 'exn'
        assert args.levels == 2
        assert args.p is None


@patch('app.cli.setup_logging')
class TestMain:
    """main関数のテスト"""

    def test_quadcheck(self, mock_logging, tmp_path, capsys):
        """quadcheck は CSV を書いてパスを表示する"""
        out = tmp_path / 'quadcheck.csv'
        assert main(['quadcheck', '--degrees', '0', '1', '--out', str(out)]) == EXIT_OK
        rows = read_csv(out)
        assert rows[0] == ['k', 'order', 'expected', 'exact']
        assert [row[2] for row in rows[1:]] == ['2', '4']
        assert capsys.readouterr().out.strip() == str(out)
        mock_logging.assert_called_once()

    def test_tangent_spectrum(self, mock_logging, tmp_path):
        """tangent-spectrum は指定点数の行を書く"""
        out = tmp_path / 'spectrum.csv'
        argv = ['tangent-spectrum', '--variant', 'pic', '--points', '5', '--out', str(out)]
        assert main(argv) == EXIT_OK
        rows = read_csv(out)
        assert len(rows) == 6
        assert all(float(row[3]) == pytest.approx(1.0) for row in rows[1:])

    def test_tangent_spectrum_bad_range(self, mock_logging, tmp_path, capsys):
        """|A| の範囲が不正なら終了コード 2"""
        argv = ['tangent-spectrum', '--points', '0', '--out', str(tmp_path / 'spectrum.csv')]
        assert main(argv) == EXIT_CONFIG
        assert '設定エラー' in capsys.readouterr().err

    def test_profile(self, mock_logging, tmp_path):
        """profile は実行記録から τ ごとの割合を書く"""
        records = tmp_path / 'records.csv'
        write_records(str(records), [record('exn', 200), record('modn', 100), record('exn', 0, cells=64),
                                     record('modn', 300, cells=64)])
        out = tmp_path / 'profile.csv'
        assert main(['profile', '--in', str(records), '--tau', '1', '2', '--out', str(out)]) == EXIT_OK
        rows = read_csv(out)
        assert sorted(rows[0][1:]) == ['exn', 'modn']
        assert [float(value) for value in rows[1]][0] == 1.0

    def test_profile_missing_input(self, mock_logging, tmp_path):
        """実行記録がなければ終了コード 2"""
        argv = ['profile', '--in', str(tmp_path / 'none.csv'), '--out', str(tmp_path / 'profile.csv')]
        assert main(argv) == EXIT_CONFIG

    def test_missing_config(self, mock_logging, tmp_path, capsys):
        """設定ファイルがなければ終了コード 2"""
        assert main(['quadcheck', '--config', str(tmp_path / 'none.ini')]) == EXIT_CONFIG
        assert '設定エラー' in capsys.readouterr().err

    def test_invalid_config_value(self, mock_logging, tmp_path):
        """設定値が不正なら終了コード 2"""
        config = tmp_path / 'config.ini'
        config.write_text('[MODEL]\np = abc\n', encoding='utf-8')
        assert main(['quadcheck', '--config', str(config)]) == EXIT_CONFIG

    def test_invalid_override(self, mock_logging, tmp_path):
        """範囲外の上書き値も終了コード 2"""
        assert main(['convergence', '--p', '3.0', '--out', str(tmp_path / 'c.csv')]) == EXIT_CONFIG

    @patch('app.cli.run_convergence', side_effect=RuntimeError('処理中にエラーが発生しました: x'))
    def test_runtime_error(self, mock_run, mock_logging, tmp_path, capsys):
        """実行時エラーは終了コード 1"""
        assert main(['convergence', '--levels', '1', '--out', str(tmp_path / 'c.csv')]) == EXIT_RUNTIME
        assert 'エラー' in capsys.readouterr().err

    @patch('app.cli.quadcheck_rows', side_effect=KeyError('k'))
    def test_unexpected_error(self, mock_rows, mock_logging, tmp_path, capsys):
        """予期しない例外も終了コード 1"""
        assert main(['quadcheck', '--out', str(tmp_path / 'q.csv')]) == EXIT_RUNTIME
        assert '処理中にエラーが発生しました' in capsys.readouterr().err

    @patch('app.cli.run_sweep')
    def test_sweep_uses_config_grid(self, mock_sweep, mock_logging, tmp_path):
        """sweep は指定メッシュと線形化の直積を run_sweep に渡す"""
        mock_sweep.return_value = [record('exn', 10)]
        out = tmp_path / 'records.csv'
        argv = ['sweep', '--cells-list', '2', '--variants', 'exn', 'modn', '--max-workers', '2', '--out', str(out)]
        assert main(argv) == EXIT_OK
        instances = mock_sweep.call_args.args[1]
        assert len(instances) == 16 * 2
        assert mock_sweep.call_args.args[2] == 2
        assert len(read_csv(out)) == 2
