from .api import create_app
from .errors import register_error_handlers, status_for

__all__ = [
    'create_app',
    'register_error_handlers',
    'status_for'
]
