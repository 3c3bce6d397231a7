from .formatters import *
from .random_streams import stream

__all__ = [
    'format_timestamp',
    'format_tick_report',
    'format_summary_table',
    'format_lift_report',
    'stream'
]
