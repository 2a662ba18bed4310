import os
from typing import List
from dotenv import load_dotenv

# 加载.env文件
load_dotenv()


def _env_bool(key: str, default: str = 'false') -> bool:
    return os.getenv(key, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """应用配置类"""

    # Flask配置
    FLASK_ENV = os.getenv('FLASK_ENV', 'development')
    DEBUG = FLASK_ENV == 'development'

    # 对象池配置
    PGL_MODE = os.getenv('PGL_MODE', '')
    PGL_POOL_PATH = os.getenv('PGL_POOL_PATH', 'data/pool.pgl')
    PGL_POOL_SIZE = int(os.getenv('PGL_POOL_SIZE', 64 << 20))
    PGL_ROWS_PER_ZONE = int(os.getenv('PGL_ROWS_PER_ZONE', 100))
    PGL_CHUNK_SIZE = int(os.getenv('PGL_CHUNK_SIZE', 262144))
    PGL_TX_SLOTS = int(os.getenv('PGL_TX_SLOTS', 8))
    PGL_LOG_PER_ZONE = int(os.getenv('PGL_LOG_PER_ZONE', 1 << 20))
    PGL_OVERFLOW_CHUNKS = int(os.getenv('PGL_OVERFLOW_CHUNKS', 8))

    # 校验行与事务配置
    PGL_LOCK_GRANULE = int(os.getenv('PGL_LOCK_GRANULE', 8192))
    PGL_PARITY_THRESHOLD = int(os.getenv('PGL_PARITY_THRESHOLD', 8192))
    PGL_FREEZE_POLICY = os.getenv('PGL_FREEZE_POLICY', 'block')
    PGL_FREEZE_TIMEOUT = float(os.getenv('PGL_FREEZE_TIMEOUT', 30))
    PGL_SCRUB_INTERVAL = int(os.getenv('PGL_SCRUB_INTERVAL', 100000))
    PGL_DEBUG_OBJECT_LOCKS = _env_bool('PGL_DEBUG_OBJECT_LOCKS')

    # 管理服务定时任务
    PGL_SCRUB_PERIOD_SECONDS = int(os.getenv('PGL_SCRUB_PERIOD_SECONDS', 3600))
    PGL_STATS_PERIOD_SECONDS = int(os.getenv('PGL_STATS_PERIOD_SECONDS', 600))

    # 日志配置
    LOG_DIR = os.getenv('LOG_DIR', 'logs')
    LOG_TIMEZONE = os.getenv('LOG_TIMEZONE', 'Asia/Shanghai')

    # 服务器配置
    HOST = os.getenv('HOST', '0.0.0.0')
    PORT = int(os.getenv('PORT', 8090))
    THREADS = int(os.getenv('THREADS', 4))

    @classmethod
    def mode_name(cls, cli_mode: str = None) -> str:
        """环境变量 PGL_MODE 优先于命令行 --mode"""
        return cls.PGL_MODE or cli_mode or 'mlpc'

    @classmethod
    def pool_options(cls, mode: str = None, **overrides):
        """
        根据配置构建 PoolOptions

        Args:
            mode: 命令行给出的保护模式，PGL_MODE 非空时被覆盖
            overrides: 直接覆盖 PoolOptions 的字段

        Returns:
            PoolOptions: 打开池时的运行参数
        """
        from pool import PoolOptions, ProtectionMode
        values = dict(
            mode=ProtectionMode.parse(cls.mode_name(mode)),
            lock_granule=cls.PGL_LOCK_GRANULE,
            parity_threshold=cls.PGL_PARITY_THRESHOLD,
            freeze_policy=cls.PGL_FREEZE_POLICY,
            freeze_timeout=cls.PGL_FREEZE_TIMEOUT,
            debug_object_locks=cls.PGL_DEBUG_OBJECT_LOCKS,
        )
        values.update(overrides)
        return PoolOptions(**values)

    @classmethod
    def validate(cls) -> List[str]:
        """验证配置项，返回非法的键"""
        from errors import PoolError
        from pool import ProtectionMode
        invalid = []
        try:
            ProtectionMode.parse(cls.mode_name())
        except PoolError:
            invalid.append('PGL_MODE')
        if cls.PGL_POOL_SIZE <= 0 or cls.PGL_POOL_SIZE % 4096:
            invalid.append('PGL_POOL_SIZE')
        if cls.PGL_ROWS_PER_ZONE < 2:
            invalid.append('PGL_ROWS_PER_ZONE')
        if cls.PGL_CHUNK_SIZE < 4096 or cls.PGL_CHUNK_SIZE & (cls.PGL_CHUNK_SIZE - 1):
            invalid.append('PGL_CHUNK_SIZE')
        if cls.PGL_TX_SLOTS < 1:
            invalid.append('PGL_TX_SLOTS')
        if cls.PGL_LOG_PER_ZONE <= 0 or cls.PGL_LOG_PER_ZONE % 4096:
            invalid.append('PGL_LOG_PER_ZONE')
        if cls.PGL_LOCK_GRANULE < 8 or cls.PGL_LOCK_GRANULE % 8:
            invalid.append('PGL_LOCK_GRANULE')
        if cls.PGL_FREEZE_POLICY not in ('block', 'fail'):
            invalid.append('PGL_FREEZE_POLICY')
        if cls.PGL_SCRUB_INTERVAL <= 0:
            invalid.append('PGL_SCRUB_INTERVAL')
        return invalid


# 创建配置实例
config = Config()
