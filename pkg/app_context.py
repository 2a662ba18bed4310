from typing import Optional

from flask import Flask

app = Flask(__name__)

# 管理服务当前打开的对象池，由 app.init_app 设置
_state = {'pool': None}


def set_pool(pool) -> None:
    _state['pool'] = pool


def get_pool() -> Optional[object]:
    return _state['pool']

# 蓝图注册将在应用启动时进行，避免循环导入
