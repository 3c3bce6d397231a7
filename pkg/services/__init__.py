from .bandit import ThompsonBandit
from .scheduler import SchedulerService
from .slate_service import SlateService
from .logs import LogService

__all__ = [
    'ThompsonBandit',
    'SchedulerService',
    'SlateService',
    'LogService'
]
