#!/usr/bin/env python3
import os
import logging
from dataclasses import dataclass, fields
from logging.handlers import RotatingFileHandler
from typing import Mapping, Optional

import pytz
from colorlog import ColoredFormatter
from dotenv import dotenv_values

# ========================================
# APPLICATION INFORMATION
# ========================================
APP_NAME = "freshrec"
APP_VERSION = "1.0.0"
APP_BUILD_DATE = "2026-10-16"

HOUR = 3600
DAY = 24 * HOUR
WEEK = 7 * DAY

INDEX_MODES = ("exact", "ivf")
POLICY_NAMES = ("Editorial", "ColdStart", "TsColdStart")

logger = logging.getLogger(__name__)


# ========================================
# VALUE PARSERS
# ========================================

def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ValueError(f"{key} must be a valid integer, got {raw!r}")


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ValueError(f"{key} must be a valid number, got {raw!r}")


def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key} must be a boolean (true/false), got {raw!r}")


def _parse_list(key: str, raw: str) -> tuple[str, ...]:
    items = tuple(p.strip() for p in raw.split(",") if p.strip())
    if not items:
        raise ValueError(f"{key} must be a non-empty comma separated list")
    return items


# ========================================
# SETTINGS
# ========================================

@dataclass(frozen=True)
class Settings:
    # ========== FILE PATHS ==========
    data_dir: str = "./freshrec_data"

    # ========== LOGGING SETTINGS ==========
    log_level: str = "INFO"
    log_max_size_mb: int = 10
    log_backup_count: int = 5
    log_cleanup_enabled: bool = False
    log_retention_days: int = 14

    # ========== TIMEZONE CONFIGURATION ==========
    timezone: str = "UTC"

    # ========== COLLABORATIVE FILTERING ==========
    embedding_dim: int = 32
    svd_n_iter: int = 7
    svd_oversampling: int = 8
    svd_seed: int = 0
    like_weight: float = 1.0
    cf_window_days: int = 7
    min_interactions: int = 10

    # ========== COLD-START NETWORK ==========
    hidden_1: int = 64
    hidden_2: int = 64
    label_buckets: int = 64
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    train_seed: int = 0
    usage_cutoffs_hours: tuple[int, ...] = (0, 4, 24, 72)

    # ========== VECTOR INDEX ==========
    index_mode: str = "exact"
    index_clusters: int = 0
    index_nprobe: int = 0
    index_spill: int = 1
    index_seed: int = 0

    # ========== BANDIT ==========
    prior_mu0: float = 0.0
    prior_sigma2: float = 1.0
    obs_var: float = 0.25
    affinity_weight: float = 1.0
    seen_depth: int = 3

    # ========== CADENCES ==========
    refresh_period_hours: int = 4
    retrain_period_days: int = 7

    # ========== CAROUSEL ==========
    carousel_size: int = 12
    view_all_size: int = 100
    editorial_list_size: int = 20
    issued_slate_limit: int = 200_000
    service_seed: int = 0

    # ========== NETWORK & API SETTINGS ==========
    http_host: str = "0.0.0.0"
    http_port: int = 8080

    # ========== SIMULATOR ==========
    sim_users: int = 2000
    sim_paired: bool = True
    sim_genres: int = 8
    sim_artists: int = 1500
    sim_labels: int = 200
    sim_albums_per_day: int = 70
    sim_history_days: int = 14
    sim_horizon_days: int = 28
    sim_latent_dim: int = 16
    sim_jitter: float = 0.3
    sim_gamma: float = 0.85
    sim_click_slope: float = 2.5
    sim_target_ctr: float = 0.05
    sim_streams_per_day: float = 4.0
    sim_favorites_per_user: float = 3.0
    sim_like_prob: float = 0.1
    sim_embedding_dim: int = 16
    sim_epochs: int = 60
    sim_prior_sigma2: float = 0.0025
    sim_obs_var: float = 1.0
    sim_seeds: int = 5
    sim_policies: tuple[str, ...] = POLICY_NAMES

    # ---------- derived paths ----------

    @property
    def log_file(self) -> str:
        return os.path.join(self.data_dir, "freshrec.log")

    @property
    def catalog_file(self) -> str:
        return os.path.join(self.data_dir, "catalog.jsonl")

    @property
    def events_file(self) -> str:
        return os.path.join(self.data_dir, "events.jsonl")

    @property
    def display_log_file(self) -> str:
        return os.path.join(self.data_dir, "displays.jsonl")

    @property
    def store_file(self) -> str:
        return os.path.join(self.data_dir, "embeddings.bin")

    @property
    def model_file(self) -> str:
        return os.path.join(self.data_dir, "coldstart.bin")

    @property
    def arms_file(self) -> str:
        return os.path.join(self.data_dir, "arms.jsonl")

    @property
    def tz(self) -> pytz.BaseTzInfo:
        return pytz.timezone(self.timezone)

    @property
    def refresh_period(self) -> int:
        return self.refresh_period_hours * HOUR

    @property
    def retrain_period(self) -> int:
        return self.retrain_period_days * DAY

    def validate(self) -> "Settings":
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"LOG_LEVEL '{self.log_level}' is not a logging level")
        try:
            pytz.timezone(self.timezone)
        except pytz.UnknownTimeZoneError:
            raise ValueError(
                f"Invalid TIMEZONE: {self.timezone}. Must be a valid IANA timezone (e.g., 'UTC', 'Europe/Paris')"
            )
        if self.index_mode not in INDEX_MODES:
            raise ValueError(f"INDEX_MODE '{self.index_mode}' not in {INDEX_MODES}")
        for name in self.sim_policies:
            if name not in POLICY_NAMES:
                raise ValueError(f"SIM_POLICIES entry '{name}' not in {POLICY_NAMES}")

        positive = (
            "embedding_dim", "svd_n_iter", "hidden_1", "hidden_2", "label_buckets",
            "epochs", "batch_size", "cf_window_days", "seen_depth",
            "refresh_period_hours", "retrain_period_days", "carousel_size",
            "view_all_size", "editorial_list_size", "index_spill", "sim_genres",
            "sim_artists", "sim_labels", "sim_latent_dim", "sim_embedding_dim",
            "sim_epochs", "sim_seeds", "issued_slate_limit",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name.upper()} must be >= 1")

        non_negative = (
            "svd_oversampling", "like_weight", "min_interactions", "learning_rate",
            "index_clusters", "index_nprobe", "sim_users", "sim_albums_per_day",
            "sim_history_days", "sim_horizon_days", "sim_jitter",
            "sim_streams_per_day", "sim_favorites_per_user", "log_backup_count",
        )
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValueError(f"{name.upper()} must be >= 0")

        for name in ("prior_sigma2", "obs_var", "sim_prior_sigma2", "sim_obs_var", "log_max_size_mb"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name.upper()} must be > 0")
        if not 0.0 <= self.sim_gamma < 1.0:
            raise ValueError("SIM_GAMMA must be in [0, 1)")
        if not 0.0 < self.sim_target_ctr < 1.0:
            raise ValueError("SIM_TARGET_CTR must be in (0, 1)")
        if not 0.0 <= self.sim_like_prob <= 1.0:
            raise ValueError("SIM_LIKE_PROB must be in [0, 1]")
        if self.carousel_size > self.view_all_size:
            raise ValueError("CAROUSEL_SIZE must not exceed VIEW_ALL_SIZE")
        return self


def _convert(key: str, raw: str, default):
    if isinstance(default, bool):
        return _parse_bool(key, raw)
    if isinstance(default, int):
        return _parse_int(key, raw)
    if isinstance(default, float):
        return _parse_float(key, raw)
    if isinstance(default, tuple):
        items = _parse_list(key, raw)
        if default and isinstance(default[0], int):
            return tuple(_parse_int(key, item) for item in items)
        return items
    return raw.strip()


def settings_from_mapping(values: Mapping[str, Optional[str]]) -> Settings:
    """Build Settings from upper-case KEY=value pairs; missing keys keep defaults."""
    overrides = {}
    for f in fields(Settings):
        raw = values.get(f.name.upper())
        if raw is None or raw == "":
            continue
        overrides[f.name] = _convert(f.name.upper(), raw, f.default)
    return Settings(**overrides).validate()


def load_settings(path: Optional[str] = None) -> Settings:
    """
    Load configuration.

    Precedence: key-value file (dotenv syntax) > process environment > defaults.
    """
    values: dict[str, Optional[str]] = dict(os.environ)
    if path:
        if not os.path.exists(path):
            raise ValueError(f"Config file not found: {path}")
        values.update(dotenv_values(path))
    return settings_from_mapping(values)


# ========================================
# LOGGING SETUP
# ========================================

def setup_logging(settings: Settings, to_file: bool = True) -> None:
    """Configure logging system."""
    file_log_format = "%(asctime)s | %(levelname)-8s | %(name)-25s | %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"
    console_log_format = "%(log_color)s%(asctime)s | %(levelname)-8s | %(name)-25s | %(message)s"

    level = getattr(logging, settings.log_level.upper(), logging.INFO)

    console_formatter = ColoredFormatter(
        console_log_format,
        datefmt=date_format,
        log_colors={
            "DEBUG": "reset",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "bold_red",
        },
    )
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(console_formatter)
    console_handler.setLevel(level)

    handlers: list[logging.Handler] = [console_handler]

    if to_file:
        os.makedirs(settings.data_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            settings.log_file,
            maxBytes=settings.log_max_size_mb * 1024 * 1024,
            backupCount=settings.log_backup_count,
            encoding="utf-8",
        )
        file_handler.setFormatter(logging.Formatter(file_log_format, datefmt=date_format))
        file_handler.setLevel(level)
        handlers.append(file_handler)

    root = logging.getLogger()
    root.setLevel(level)
    root.handlers.clear()
    for h in handlers:
        root.addHandler(h)

    # third-party chatter
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("httpcore").setLevel(logging.WARNING)
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)

    logger.info(
        "%s v%s (build %s) - configuration loaded",
        APP_NAME,
        APP_VERSION,
        APP_BUILD_DATE,
    )
