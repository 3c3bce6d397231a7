#!/usr/bin/env python3
"""
Log cleanup service

Removes rotated log files older than the retention period so a long-running
server does not fill the data directory.
"""

import os
import logging
from datetime import datetime, timedelta

from config import APP_NAME, Settings

logger = logging.getLogger(__name__)

LOG_PREFIX = f"{APP_NAME}.log"


class LogService:
    """Service for managing log file lifecycle."""

    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def _log_files(self) -> list[str]:
        try:
            names = os.listdir(self.settings.data_dir)
        except OSError as e:
            logger.warning("Cannot list %s: %s", self.settings.data_dir, e)
            return []
        return sorted(n for n in names if n.startswith(LOG_PREFIX))

    def cleanup_old_logs(self, now: int) -> int:
        """
        Delete rotated logs whose modification time is older than
        LOG_RETENTION_DAYS before `now`. The live log is never removed.
        Returns the number of files deleted.
        """
        if not self.settings.log_cleanup_enabled:
            logger.debug("Log cleanup disabled in config")
            return 0

        tz = self.settings.tz
        cutoff = datetime.fromtimestamp(now, tz) - timedelta(days=self.settings.log_retention_days)
        removed_count = 0

        for filename in self._log_files():
            if filename == LOG_PREFIX:
                continue
            file_path = os.path.join(self.settings.data_dir, filename)
            try:
                mtime = datetime.fromtimestamp(os.path.getmtime(file_path), tz=tz)
                if mtime < cutoff:
                    os.remove(file_path)
                    removed_count += 1
                    logger.info(
                        "Removed old log: %s (modified: %s)",
                        filename,
                        mtime.strftime("%Y-%m-%d %H:%M:%S"),
                    )
            except OSError as e:
                logger.warning("Failed to remove log %s: %s", filename, e)

        if removed_count > 0:
            logger.info("Cleaned up %s old log file(s)", removed_count)
        else:
            logger.debug("No logs older than %s days found", self.settings.log_retention_days)
        return removed_count

    def get_log_size(self) -> float:
        """Total size of the live and rotated logs in MB."""
        total_bytes = 0
        for filename in self._log_files():
            try:
                total_bytes += os.path.getsize(os.path.join(self.settings.data_dir, filename))
            except OSError as e:
                logger.debug("Failed to get size for log file %s: %s", filename, e)
        return total_bytes / (1024 * 1024)
