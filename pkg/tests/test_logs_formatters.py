import os

import numpy as np
import pytz

from config import DAY, Settings
from services.logs import LogService
from services.simulator import LiftReport
from services.slate_service import TickReport
from utils.formatters import format_lift_report, format_summary_table, format_tick_report, format_timestamp
from utils.random_streams import stream

from conftest import NOW


# ---------- log cleanup ----------

def _touch(path, mtime):
    path.write_text("x" * 1024)
    os.utime(path, (mtime, mtime))


def test_cleanup_removes_only_old_rotated_logs(tmp_path):
    settings = Settings(data_dir=str(tmp_path), log_cleanup_enabled=True, log_retention_days=14)
    _touch(tmp_path / "freshrec.log", NOW - 30 * DAY)
    _touch(tmp_path / "freshrec.log.1", NOW - 20 * DAY)
    _touch(tmp_path / "freshrec.log.2", NOW - 2 * DAY)
    _touch(tmp_path / "events.jsonl", NOW - 30 * DAY)

    assert LogService(settings).cleanup_old_logs(NOW) == 1
    assert sorted(os.listdir(tmp_path)) == ["events.jsonl", "freshrec.log", "freshrec.log.2"]
    assert LogService(settings).get_log_size() == 2 * 1024 / (1024 * 1024)


def test_cleanup_disabled_by_default(tmp_path):
    _touch(tmp_path / "freshrec.log.1", NOW - 300 * DAY)
    assert LogService(Settings(data_dir=str(tmp_path))).cleanup_old_logs(NOW) == 0
    assert (tmp_path / "freshrec.log.1").exists()


def test_missing_data_dir_has_no_logs(tmp_path):
    service = LogService(Settings(data_dir=str(tmp_path / "nowhere"), log_cleanup_enabled=True))
    assert service.cleanup_old_logs(NOW) == 0
    assert service.get_log_size() == 0.0


# ---------- formatters ----------

def test_format_timestamp():
    assert format_timestamp(None) == "-"
    assert format_timestamp(NOW) == "2023-11-14 22:13"
    assert format_timestamp(NOW, pytz.timezone("Europe/Paris")) == "2023-11-14 23:13"


def test_format_tick_report():
    report = TickReport(NOW, 29, 3, 3, 4, expired=["a"], registered=["b", "c"])
    assert format_tick_report(report) == (
        "Tick 2023-11-14 22:13: 29 albums in window, predictions v3, index v3, arms +2/-1 (bandit v4)"
    )


def test_format_lift_report():
    report = LiftReport("Editorial", "ColdStart", (0, 1, 2), (0.1, 0.2, 0.3), (2.0, 2.0, 2.0), (1.5, 1.5, 1.5))
    lines = format_lift_report(report).splitlines()
    assert lines[0] == "ColdStart vs Editorial (3 seeds)"
    assert "+0.2000 ± 0.1000" in lines[1]
    assert "2.000 ± 0.000" in lines[2]


def test_format_summary_table_has_header_only_without_runs():
    lines = format_summary_table([]).splitlines()
    assert len(lines) == 2
    assert lines[0].split()[:2] == ["policy", "seed"]


# ---------- random streams ----------

def test_streams_are_reproducible_and_independent():
    first = stream(5, "click", 3, 7).random(4)
    assert np.array_equal(first, stream(5, "click", 3, 7).random(4))
    assert not np.array_equal(first, stream(5, "click", 3, 8).random(4))
    assert not np.array_equal(first, stream(6, "click", 3, 7).random(4))
    assert not np.array_equal(first, stream(5, "rank", 3, 7).random(4))


def test_streams_do_not_depend_on_draw_order():
    a_then_b = (stream(1, "a").random(), stream(1, "b").random())
    b = stream(1, "b").random()
    a = stream(1, "a").random()
    assert a_then_b == (a, b)
