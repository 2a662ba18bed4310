from flask import request
import logging

from app_context import app, set_pool  # 导入应用实例
from config import config
from logging_config import setup_logging

# 注册蓝图
from pool_api import pool_bp

app.register_blueprint(pool_bp)

# 配置 JSON 编码
app.config.update(
    JSON_AS_ASCII=False,
    JSONIFY_PRETTYPRINT_REGULAR=True,
    JSONIFY_MIMETYPE='application/json; charset=utf-8'
)


# 添加全局响应处理
@app.after_request
def after_request(response):
    response.headers['Content-Type'] = 'application/json; charset=utf-8'
    # 记录每个请求的信息
    app.logger.info(f"Request: {request.method} {request.url} - Response: {response.status}")
    return response


def init_app(pool, start_scheduler: bool = True):
    """
    绑定对象池并初始化日志和定时任务

    Args:
        pool: 已打开的对象池
        start_scheduler: 是否启动定期巡检和统计任务
    """
    setup_logging(app.logger, debug=app.debug or config.DEBUG, log_file='access.log')
    app.logger.propagate = False
    set_pool(pool)
    if start_scheduler:
        from scheduler import init_scheduler
        init_scheduler(app, pool)
    app.logger.info(f"管理服务已绑定对象池: {pool.path or '(内存)'}")
    return app


def serve(pool, host: str = None, port: int = None, threads: int = None):
    """用 waitress 运行管理服务，退出时关闭调度器和对象池"""
    from waitress import serve as waitress_serve
    init_app(pool)
    app.logger.info('Starting Flask application...')
    try:
        waitress_serve(app, host=host or config.HOST, port=port or config.PORT,
                       threads=threads or config.THREADS)
    finally:
        scheduler = getattr(app, 'scheduler', None)
        if scheduler is not None:
            scheduler.shutdown(wait=False)
        pool.close()


# 启动Flask应用
if __name__ == '__main__':
    from pool import pool_open
    setup_logging(logging.getLogger())
    serve(pool_open(config.PGL_POOL_PATH, config.pool_options()))
