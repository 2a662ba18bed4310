#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对象池管理接口
所有接口返回 {'error_code', 'message', 'data'}，error_code 为 0 表示成功
"""

import functools

from flask import Blueprint, current_app, jsonify, request

from app_context import get_pool
from errors import PoolError

# 创建蓝图
pool_bp = Blueprint('pool', __name__, url_prefix='/pool')

INJECT_KINDS = ('media', 'scribble')
INJECT_TARGETS = ('page', 'object', 'metadata')


def _result(data, message: str = 'success', error_code: int = 0):
    return jsonify({'error_code': error_code, 'message': message, 'data': data})


def pool_endpoint(func):
    """取出当前池并把异常转换成统一返回结构"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        pool = get_pool()
        if pool is None or pool.closed:
            return _result({}, '对象池未打开', 3)
        try:
            return func(pool, *args, **kwargs)
        except PoolError as e:
            current_app.logger.error(f"{request.path} 失败: {e}")
            return jsonify(e.to_result())
        except Exception as e:
            current_app.logger.error(f"{request.path} 异常: {str(e)}")
            return _result({}, f'服务异常: {str(e)}', 1)
    return wrapper


@pool_bp.route('/health', methods=['GET'])
@pool_endpoint
def health(pool):
    healthy = not pool.failed
    data = {'frozen': pool.frozen, 'failed': pool.failed, 'reason': pool.failure_reason,
            'in_flight': pool.in_flight}
    return _result(data, 'ok' if healthy else '对象池已失效', 0 if healthy else 1)


@pool_bp.route('/info', methods=['GET'])
@pool_endpoint
def info(pool):
    return _result(pool.info())


@pool_bp.route('/stats', methods=['GET'])
@pool_endpoint
def stats(pool):
    return _result(pool.stats.snapshot())


@pool_bp.route('/check', methods=['GET'])
@pool_endpoint
def check(pool):
    report = pool.check()
    if report['ok']:
        return _result(report, '一致性检查通过')
    return _result(report, '发现不一致', 1)


@pool_bp.route('/scrub', methods=['POST'])
@pool_endpoint
def scrub(pool):
    from recovery import scrub as scrub_pool
    report = scrub_pool(pool)
    current_app.logger.info(f"手动巡检完成: {report.to_dict()}")
    return _result(report.to_dict(), '巡检完成')


@pool_bp.route('/inject', methods=['POST'])
@pool_endpoint
def inject(pool):
    """
    注入故障

    请求体: {"kind": "media|scribble", "target": "page|object|metadata", "seed": 0, "length": null}
    """
    from recovery import inject_fault
    body = request.get_json(silent=True) or {}
    kind = body.get('kind', 'media')
    target = body.get('target', 'page')
    if kind not in INJECT_KINDS or target not in INJECT_TARGETS:
        return _result({}, f'参数错误: kind 可选 {INJECT_KINDS}，target 可选 {INJECT_TARGETS}', 2)
    try:
        seed = int(body.get('seed', 0))
        length = body.get('length')
        length = int(length) if length is not None else None
    except (TypeError, ValueError):
        return _result({}, '参数错误: seed 和 length 必须是整数', 2)
    desc = inject_fault(pool, kind, target, seed, length)
    current_app.logger.warning(f"通过接口注入故障: {desc}")
    return _result(desc, '故障已注入')
