#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对象池管理命令行

    python cli.py create --pool data/pool.pgl --size 67108864 --rows 100
    python cli.py check --pool data/pool.pgl
    python cli.py inject --pool data/pool.pgl --media --seed 7
    python cli.py recover --pool data/pool.pgl
    python cli.py bench --structure ctree --inserts 100000 --mode scrub:50000 --json

退出码: 0 成功；1 检查发现不一致；2 参数错误；3 池不存在；其余取自 PoolError.exit_code
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from config import config
from errors import PoolError
from logging_config import setup_logging

EXIT_OK = 0
EXIT_INCONSISTENT = 1
EXIT_USAGE = 2


def _int(text: str) -> int:
    """接受 0x 前缀和 K/M/G 后缀"""
    text = text.strip().lower()
    scale = {'k': 1 << 10, 'm': 1 << 20, 'g': 1 << 30}.get(text[-1:], 1)
    if scale != 1:
        text = text[:-1]
    try:
        return int(text, 0) * scale
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是合法的整数: {text}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--pool', default=config.PGL_POOL_PATH, help='池文件路径')
    common.add_argument('--mode', default=None,
                        help='保护模式 baseline|ml|mlp|mlpc|scrub:N|conservative（PGL_MODE 优先）')
    common.add_argument('--scrub-interval', type=_int, default=None,
                        help='巡检间隔（事务数），等价于 --mode scrub:N')
    common.add_argument('--seed', type=int, default=0, help='随机种子')
    common.add_argument('--json', action='store_true', help='输出 JSON')
    common.add_argument('-v', '--verbose', action='store_true', help='输出调试日志')

    geometry = argparse.ArgumentParser(add_help=False)
    geometry.add_argument('--size', type=_int, default=config.PGL_POOL_SIZE, help='池大小（字节）')
    geometry.add_argument('--rows', type=int, default=config.PGL_ROWS_PER_ZONE, help='每区块行数')
    geometry.add_argument('--chunk', type=_int, default=config.PGL_CHUNK_SIZE, help='块大小')
    geometry.add_argument('--tx-slots', type=int, default=config.PGL_TX_SLOTS, help='日志槽个数')
    geometry.add_argument('--log-per-zone', type=_int, default=config.PGL_LOG_PER_ZONE,
                          help='每区预留的日志空间')

    parser = argparse.ArgumentParser(prog='pgl', description='容错持久对象池管理工具')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('create', parents=[common, geometry], help='新建池')
    sub.add_parser('info', parents=[common], help='池头、几何和占用信息')
    sub.add_parser('check', parents=[common], help='一致性检查，不一致时退出码非零；打开时修复过的池头和区元数据列在 repaired_on_open')
    sub.add_parser('scrub', parents=[common], help='执行一次全池巡检')
    sub.add_parser('recover', parents=[common], help='崩溃恢复并修复所有已知损坏页')

    inject = sub.add_parser('inject', parents=[common], help='注入故障')
    kind = inject.add_mutually_exclusive_group()
    kind.add_argument('--media', dest='kind', action='store_const', const='media',
                      help='介质错误：整页不可读（默认）')
    kind.add_argument('--scribble', dest='kind', action='store_const', const='scribble',
                      help='随机覆写，不超过一个块行')
    inject.add_argument('--target', choices=('page', 'object', 'metadata'), default='page')
    inject.add_argument('--length', type=_int, default=None, help='覆写长度')
    inject.set_defaults(kind='media')

    bench = sub.add_parser('bench', parents=[common, geometry], help='键值结构基准测试')
    bench.add_argument('--structure', choices=('list', 'ctree', 'skiplist', 'hashmap'), default='ctree')
    bench.add_argument('--inserts', type=_int, default=10000)
    bench.add_argument('--removes', type=_int, default=0)
    bench.add_argument('--lookups', type=_int, default=0)
    bench.add_argument('--threads', type=int, default=1)
    bench.add_argument('--key-space', type=_int, default=0, help='键空间大小，0 表示 63 位随机键')
    bench.add_argument('--memory', action='store_true', help='使用内存后端，不写池文件')
    bench.add_argument('--verify', action='store_true', help='结束后执行一致性检查')

    serve = sub.add_parser('serve', parents=[common], help='运行管理服务')
    serve.add_argument('--host', default=config.HOST)
    serve.add_argument('--port', type=int, default=config.PORT)
    serve.add_argument('--threads', type=int, default=config.THREADS)
    return parser


def _mode(args) -> str:
    if args.scrub_interval is not None and not args.mode:
        return config.mode_name(f'scrub:{args.scrub_interval}')
    return config.mode_name(args.mode)


def _options(args, **overrides):
    return config.pool_options(_mode(args), **overrides)


def _open(args, **overrides):
    from pool import pool_open
    return pool_open(args.pool, _options(args, **overrides))


def cmd_create(args) -> Dict:
    from pool import pool_create
    with pool_create(args.pool, args.size, rows_per_zone=args.rows, chunk_size=args.chunk,
                     tx_slots=args.tx_slots, log_per_zone=args.log_per_zone,
                     overflow_chunks=config.PGL_OVERFLOW_CHUNKS,
                     options=_options(args, start_scrub_worker=False)) as pool:
        info = pool.info()
        info['init_seconds'] = pool.store.init_seconds
        return info


def cmd_info(args) -> Dict:
    with _open(args, start_scrub_worker=False) as pool:
        return pool.info()


def cmd_check(args) -> Dict:
    with _open(args, start_scrub_worker=False) as pool:
        return pool.check()


def cmd_scrub(args) -> Dict:
    from recovery import scrub
    with _open(args, start_scrub_worker=False) as pool:
        return scrub(pool).to_dict()


def cmd_recover(args) -> Dict:
    from recovery import recover_pool
    with _open(args, start_scrub_worker=False) as pool:
        return recover_pool(pool)


def cmd_inject(args) -> Dict:
    from recovery import inject_fault
    with _open(args, start_scrub_worker=False) as pool:
        return inject_fault(pool, args.kind, args.target, args.seed, args.length)


def cmd_bench(args) -> Dict:
    from bench import WorkloadSpec, run_benchmark
    spec = WorkloadSpec(structure=args.structure, inserts=args.inserts, removes=args.removes,
                        lookups=args.lookups, threads=args.threads, key_space=args.key_space,
                        mode=_mode(args), seed=args.seed, verify=args.verify)
    return run_benchmark(spec, None if args.memory else args.pool, args.size,
                         options=_options(args), rows_per_zone=args.rows, chunk_size=args.chunk,
                         tx_slots=args.tx_slots, log_per_zone=args.log_per_zone)


def cmd_serve(args) -> Dict:
    from app import serve
    pool = _open(args)
    serve(pool, args.host, args.port, args.threads)
    return {}


COMMANDS = {
    'create': cmd_create,
    'info': cmd_info,
    'check': cmd_check,
    'scrub': cmd_scrub,
    'recover': cmd_recover,
    'inject': cmd_inject,
    'bench': cmd_bench,
    'serve': cmd_serve,
}


def _print_text(command: str, result: Dict):
    if command == 'check':
        print('一致性检查通过' if result['ok'] else '发现不一致')
    for key, value in result.items():
        if isinstance(value, dict):
            print(f'{key}:')
            for sub_key, sub_value in value.items():
                print(f'  {sub_key}: {sub_value}')
        else:
            print(f'{key}: {value}')


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    Returns:
        int: 进程退出码
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    setup_logging(debug=True, level=logging.DEBUG if args.verbose else logging.WARNING)

    try:
        result = COMMANDS[args.command](args)
    except PoolError as e:
        logging.error(f"{args.command} 失败: {e}")
        if args.json:
            print(json.dumps(e.to_result(), ensure_ascii=False, indent=2))
        else:
            print(f'错误: {e}', file=sys.stderr)
        return e.exit_code

    if args.json:
        failed = args.command == 'check' and not result['ok']
        print(json.dumps({'error_code': EXIT_INCONSISTENT if failed else 0,
                          'message': '发现不一致' if failed else 'success', 'data': result},
                         ensure_ascii=False, indent=2, default=str))
    elif result:
        _print_text(args.command, result)
    if args.command == 'check' and not result['ok']:
        return EXIT_INCONSISTENT
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
