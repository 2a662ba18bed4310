import json

import pytest

from cli import _int, main
from config import Config
from layout import HEADER_OFF

GEOMETRY = ['--size', '4m', '--rows', '16', '--chunk', '16k', '--tx-slots', '4',
            '--log-per-zone', '256k']


def run_json(capsys, *argv):
    code = main(list(argv) + ['--json'])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def pool_path(tmp_path, capsys):
    path = str(tmp_path / 'cli.pgl')
    assert main(['create', '--pool', path] + GEOMETRY) == 0
    capsys.readouterr()
    return path


def test_int_suffixes():
    assert _int('4k') == 4096
    assert _int('2M') == 2 << 20
    assert _int('0x10') == 16
    assert _int('1g') == 1 << 30


def test_create_and_info(pool_path, capsys):
    code, result = run_json(capsys, 'info', '--pool', pool_path)
    assert code == 0 and result['error_code'] == 0
    data = result['data']
    assert data['rows_per_zone'] == 16
    assert data['chunk_size'] == 16384
    assert data['mode'] == 'mlpc'


def test_inject_check_recover_cycle(pool_path, capsys):
    code, result = run_json(capsys, 'bench', '--pool', pool_path, '--structure', 'ctree',
                            '--inserts', '120', *GEOMETRY)
    assert code == 0 and result['data']['items'] == 120
    assert main(['check', '--pool', pool_path]) == 0

    code, result = run_json(capsys, 'inject', '--pool', pool_path, '--media', '--target', 'object',
                            '--seed', '3')
    assert code == 0
    page = result['data']['page']

    code, result = run_json(capsys, 'check', '--pool', pool_path)
    assert code == 1 and result['error_code'] == 1
    assert result['data']['poisoned_pages'] == [page]

    code, result = run_json(capsys, 'recover', '--pool', pool_path)
    assert code == 0 and result['data']['poisoned_repaired'] == 1
    assert main(['check', '--pool', pool_path]) == 0


def test_scrub_command(pool_path, capsys):
    main(['bench', '--pool', pool_path, '--structure', 'list', '--inserts', '30'])
    main(['inject', '--pool', pool_path, '--scribble', '--target', 'object', '--seed', '4',
          '--length', '1'])
    capsys.readouterr()
    code, result = run_json(capsys, 'scrub', '--pool', pool_path)
    assert code == 0 and result['data']['repaired'] == 1
    assert main(['check', '--pool', pool_path]) == 0


def test_check_lists_repairs_made_on_open(pool_path, capsys):
    with open(pool_path, 'r+b') as f:
        f.seek(HEADER_OFF + 8)
        f.write(b'\xee' * 16)
    code, result = run_json(capsys, 'check', '--pool', pool_path)
    assert code == 0 and result['data']['ok']
    assert result['data']['repaired_on_open'] == ['header']

    code, result = run_json(capsys, 'check', '--pool', pool_path)
    assert code == 0 and result['data']['repaired_on_open'] == []


def test_missing_pool(tmp_path, capsys):
    code, result = run_json(capsys, 'check', '--pool', str(tmp_path / 'absent.pgl'))
    assert code == 3
    assert result['data']['type'] == 'PoolNotFoundError'


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(['create', '--rows', 'many']) == 2
    assert main(['inject', '--target', 'disk']) == 2
    assert main(['bench', '--memory', '--mode', 'fastest', '--inserts', '5']) == 2


def test_bench_in_memory(capsys):
    code, result = run_json(capsys, 'bench', '--memory', '--structure', 'skiplist', '--inserts', '50',
                            '--lookups', '20', '--verify', *GEOMETRY)
    assert code == 0
    assert result['data']['check_ok']
    assert result['data']['phases']['lookup']['ops'] == 20


def test_env_mode_overrides_flag(pool_path, capsys, monkeypatch):
    monkeypatch.setattr(Config, 'PGL_MODE', 'baseline')
    code, result = run_json(capsys, 'info', '--pool', pool_path, '--mode', 'conservative')
    assert result['data']['mode'] == 'baseline'
    monkeypatch.setattr(Config, 'PGL_MODE', '')
    code, result = run_json(capsys, 'info', '--pool', pool_path, '--scrub-interval', '500')
    assert result['data']['mode'] == 'scrub:500'
