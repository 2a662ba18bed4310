#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常定义模块
库内部统一抛出 PoolError 体系的异常，CLI 和管理接口再把它们转换成
{'error_code', 'message', 'data'} 结构
"""

from typing import Optional


class PoolError(Exception):
    """对象池异常基类"""

    exit_code = 1

    def to_result(self) -> dict:
        """转换为接口返回结构"""
        return {
            'error_code': self.exit_code,
            'message': str(self),
            'data': {'type': type(self).__name__}
        }


class LayoutError(PoolError):
    """池布局参数非法（尺寸过小、未按页对齐等）"""
    exit_code = 2


class StoreError(PoolError):
    """持久存储访问越界、原子写未对齐或后端用法错误"""
    exit_code = 2


class OptionError(PoolError):
    """运行参数或环境配置非法"""
    exit_code = 2


class PoolNotFoundError(StoreError):
    """池文件不存在"""
    exit_code = 3


class InvalidRefError(PoolError):
    """对象引用非法：空引用、越界、指向校验行或元数据"""
    exit_code = 2


class MediaError(PoolError):
    """访问了被标记为损坏（poisoned）的页"""
    exit_code = 5

    def __init__(self, page_offset: int, message: Optional[str] = None):
        super().__init__(message or f"介质错误: 页 0x{page_offset:x} 不可读")
        self.page_offset = page_offset


class UnrecoverablePoolError(PoolError):
    """池级别不可恢复：头部两份副本都损坏，或日志与副本都损坏"""
    exit_code = 4


class UnrecoverableCorruption(PoolError):
    """同一页列中有重叠损坏，或修复后对象校验仍失败"""
    exit_code = 4

    def __init__(self, message: str, pages: Optional[list] = None):
        super().__init__(message)
        self.pages = list(pages or [])


class PoolFrozenError(PoolError):
    """池处于冻结状态，拒绝开启新事务"""
    exit_code = 6


class TxError(PoolError):
    """事务异常基类"""
    exit_code = 7


class TxAbortedError(TxError):
    """事务已中止"""


class CanaryViolation(TxError):
    """微缓冲区金丝雀被破坏，提交被中止"""


class OutOfSpaceError(TxError):
    """分配空间不足"""


class DoubleFreeError(TxError):
    """重复释放对象"""


class LogSpaceExhausted(TxError):
    """事务日志超出日志槽和溢出区容量"""


class ObjectBusyError(TxError):
    """调试模式下检测到两个事务并发修改同一对象"""


class FatalFaultError(BaseException):
    """
    进程级致命故障（相当于结束进程）

    两个线程同时检测到故障，或检测线程正处于自己的提交阶段时抛出。
    池保持原样，下次打开时由崩溃恢复处理。
    """

    exit_code = 9


class SimulatedCrash(BaseException):
    """模拟后端到达预设崩溃点"""

    exit_code = 9
