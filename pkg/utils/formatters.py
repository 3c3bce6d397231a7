#!/usr/bin/env python3
"""
Text formatting utilities for CLI output

Timestamps in the configured timezone, tick summaries and the simulation
summary table printed after `freshrec simulate`.
"""

from datetime import datetime
from typing import Iterable, Optional

import pytz


def format_timestamp(ts: Optional[int], tz: pytz.BaseTzInfo = pytz.utc) -> str:
    """Epoch seconds as 'YYYY-MM-DD HH:MM' in tz; '-' when missing."""
    if ts is None:
        return "-"
    return datetime.fromtimestamp(ts, tz).strftime("%Y-%m-%d %H:%M")


def format_tick_report(report, tz: pytz.BaseTzInfo = pytz.utc) -> str:
    return (
        f"Tick {format_timestamp(report.now, tz)}: "
        f"{report.window_size} albums in window, "
        f"predictions v{report.predictions_version}, index v{report.index_version}, "
        f"arms +{len(report.registered)}/-{len(report.expired)} (bandit v{report.bandit_version})"
    )


def format_summary_table(reports: Iterable) -> str:
    """One row per (policy, seed) run."""
    header = (
        f"{'policy':<12} {'seed':>4} {'users':>6} {'slates':>8} {'clicks':>7} "
        f"{'CTR':>7} {'wk shown':>9} {'wk clicked':>11}"
    )
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.policy:<12} {r.seed:>4} {r.users:>6} {r.slates:>8} {r.clicks:>7} "
            f"{r.display_to_click_rate:>7.4f} {r.weekly_distinct_albums_displayed:>9.1f} "
            f"{r.weekly_distinct_albums_clicked:>11.1f}"
        )
    return "\n".join(lines)


def format_lift_report(report) -> str:
    ctr, ctr_sd = report.ctr_lift_mean_std
    shown, shown_sd = report.displayed_ratio_mean_std
    clicked, clicked_sd = report.clicked_ratio_mean_std
    return "\n".join(
        [
            f"{report.policy_b} vs {report.policy_a} ({len(report.seeds)} seeds)",
            f"  CTR lift:                {ctr:+.4f} ± {ctr_sd:.4f}",
            f"  weekly shown ratio:      {shown:.3f} ± {shown_sd:.3f}",
            f"  weekly clicked ratio:    {clicked:.3f} ± {clicked_sd:.3f}",
        ]
    )
