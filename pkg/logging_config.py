#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
日志配置模块
按配置的时区输出时间，开发环境只输出到控制台，其余环境同时写入按天滚动的日志文件
"""

import logging
import os
from datetime import datetime
from logging.handlers import TimedRotatingFileHandler
from typing import Optional

import pytz

from config import Config

FILE_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class TimezoneFormatter(logging.Formatter):
    """自定义日志格式化器，使用配置的时区"""

    def __init__(self, fmt: Optional[str] = None, datefmt: Optional[str] = None,
                 timezone: Optional[str] = None):
        super().__init__(fmt, datefmt)
        self.tz = pytz.timezone(timezone or Config.LOG_TIMEZONE)

    def converter(self, timestamp):
        return datetime.fromtimestamp(timestamp, self.tz)

    def formatTime(self, record, datefmt=None):
        dt = self.converter(record.created)
        if datefmt:
            return dt.strftime(datefmt)
        return dt.strftime('%Y-%m-%d %H:%M:%S')


def setup_logging(logger: Optional[logging.Logger] = None, debug: Optional[bool] = None,
                  level: int = logging.INFO, log_file: str = 'pool.log') -> logging.Logger:
    """
    配置日志处理器

    Args:
        logger: 目标 logger，默认根 logger
        debug: 是否为开发环境（只输出控制台），默认取 Config.DEBUG
        level: 日志级别
        log_file: 日志目录下的文件名

    Returns:
        logging.Logger: 配置好的 logger
    """
    logger = logger or logging.getLogger()
    debug = Config.DEBUG if debug is None else debug
    for handler in list(logger.handlers):
        if getattr(handler, '_pgl_handler', False):
            logger.removeHandler(handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(TimezoneFormatter(CONSOLE_FORMAT))
    console_handler.setLevel(level)
    console_handler._pgl_handler = True
    logger.addHandler(console_handler)

    if not debug:
        os.makedirs(Config.LOG_DIR, exist_ok=True)
        file_handler = TimedRotatingFileHandler(
            os.path.join(Config.LOG_DIR, log_file),
            when='midnight',  # 每天午夜滚动
            interval=1,       # 间隔1天
            backupCount=30,   # 保留30天的日志
            encoding='utf-8'  # 确保中文正确显示
        )
        file_handler.setFormatter(TimezoneFormatter(FILE_FORMAT))
        file_handler.setLevel(level)
        file_handler._pgl_handler = True
        logger.addHandler(file_handler)

    logger.setLevel(level)
    return logger
