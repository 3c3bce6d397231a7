#!/usr/bin/env python3
"""
Gaussian Thompson Sampling over new-album arms

Each arm carries a Gaussian posterior over a scalar click-affinity offset
added to the personalized dot-product score. Rewards are attributed with a
cascade rule and absorbed in batches on the refresh cadence.
"""

import logging
import math
import threading
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from config import HOUR, WEEK
from errors import ExpiredArmError, FormatError, ValidationError
from storage.codec import encode_records, iter_source
from storage.files import safe_write

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BanditConfig:
    prior_mu0: float = 0.0
    prior_sigma2_0: float = 1.0
    obs_var: float = 0.25
    affinity_weight: float = 1.0
    seen_depth: int = 3
    update_period: int = 4 * HOUR

    def __post_init__(self) -> None:
        if self.prior_sigma2_0 <= 0 or self.obs_var <= 0:
            raise ValidationError("bandit variances must be > 0")
        if self.seen_depth < 1:
            raise ValidationError("seen_depth must be >= 1")


@dataclass(frozen=True)
class ArmState:
    album_id: str
    mu: float
    sigma2: float
    n_obs: int
    created_at: int
    expires_at: int
    pending: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "album": self.album_id,
            "mu": self.mu,
            "sigma2": self.sigma2,
            "n_obs": self.n_obs,
            "created_at": self.created_at,
            "expires_at": self.expires_at,
        }


def posterior_update(arm: ArmState, obs_var: float, rewards: Sequence[int] = ()) -> ArmState:
    """
    Gaussian-conjugate update with known observation variance, absorbing
    arm.pending plus `rewards`; the result has an empty pending buffer.
    """
    observed = tuple(arm.pending) + tuple(rewards)
    n = len(observed)
    if n == 0:
        return arm
    precision = 1.0 / arm.sigma2 + n / obs_var
    mu = (arm.mu / arm.sigma2 + sum(observed) / obs_var) / precision
    return replace(arm, mu=mu, sigma2=1.0 / precision, n_obs=arm.n_obs + n, pending=())


def batch_update(
    arms: Mapping[str, ArmState],
    pending: Optional[Mapping[str, Sequence[int]]] = None,
    obs_var: float = 0.25,
) -> dict[str, ArmState]:
    pending = pending or {}
    return {
        album_id: posterior_update(arm, obs_var, pending.get(album_id, ()))
        for album_id, arm in arms.items()
    }


def attribute_rewards(
    slate_positions: Sequence[str],
    click_pos: Optional[int] = None,
    seen_depth: int = 3,
) -> dict[str, int]:
    """
    Cascade attribution: with a click at p, positions before p get 0 and p
    gets 1; without a click the first seen_depth positions get 0. Anything
    further down is unobserved and left out.
    """
    if click_pos is not None:
        if not 1 <= click_pos <= len(slate_positions):
            raise ValidationError(f"click position {click_pos} outside slate of {len(slate_positions)}")
        rewards = {album_id: 0 for album_id in slate_positions[:click_pos - 1]}
        rewards[slate_positions[click_pos - 1]] = 1
        return rewards
    return {album_id: 0 for album_id in slate_positions[:seen_depth]}


class Ranking(NamedTuple):
    ranked: list[tuple[str, float]]
    skipped: int


def sample_and_rank(
    user_vec: np.ndarray,
    predicted: Mapping[str, np.ndarray],
    arms: Mapping[str, ArmState],
    k: int,
    rng: np.random.Generator,
    exclude: Iterable[str] = (),
    affinity_weight: float = 1.0,
) -> Ranking:
    """
    score(a) = affinity_weight * <user, predicted[a]> + theta_a with
    theta_a ~ N(mu_a, sigma2_a) drawn fresh per call (in album id order).
    Arms without a prediction are skipped and counted.
    """
    excluded = set(exclude)
    candidates = sorted(a for a in arms if a not in excluded)
    usable = [a for a in candidates if a in predicted]
    skipped = len(candidates) - len(usable)
    if skipped:
        logger.warning("sample_and_rank: %d arms without prediction skipped", skipped)
    if not usable or k < 1:
        return Ranking([], skipped)

    vectors = np.vstack([predicted[a] for a in usable])
    mu = np.array([arms[a].mu for a in usable])
    sigma = np.sqrt(np.array([arms[a].sigma2 for a in usable]))
    theta = mu + sigma * rng.standard_normal(len(usable))
    scores = affinity_weight * (vectors @ np.asarray(user_vec, dtype=np.float64)) + theta

    order = np.lexsort((np.arange(len(usable)), -scores))[:k]
    return Ranking([(usable[i], float(scores[i])) for i in order], skipped)


class ThompsonBandit:
    """
    Arm table plus per-arm pending reward buffers.

    Structural changes (register, expire, batch update) publish a fresh arm
    dict, so a mapping obtained from arms() never changes underneath a reader.
    Reward recording only appends to the buffers.
    """

    def __init__(self, config: BanditConfig = BanditConfig()) -> None:
        self.config = config
        self._lock = threading.Lock()
        self._arms: dict[str, ArmState] = {}
        self._pending: dict[str, list[int]] = {}
        self.version = 0
        self.dropped_rewards = 0

    def arms(self) -> Mapping[str, ArmState]:
        return MappingProxyType(self._arms)

    def pending(self) -> dict[str, tuple[int, ...]]:
        with self._lock:
            return {a: tuple(r) for a, r in self._pending.items() if r}

    def get(self, album_id: str) -> Optional[ArmState]:
        """Arm state with its buffered rewards in `pending`."""
        arm = self._arms.get(album_id)
        if arm is None:
            return None
        buffered = self._pending.get(album_id)
        return replace(arm, pending=tuple(buffered)) if buffered else arm

    def __len__(self) -> int:
        return len(self._arms)

    def _new_arm(self, album_id: str, release_ts: int, now: int) -> ArmState:
        if not 0 <= now - release_ts < WEEK:
            raise ExpiredArmError()
        return ArmState(
            album_id=album_id,
            mu=self.config.prior_mu0,
            sigma2=self.config.prior_sigma2_0,
            n_obs=0,
            created_at=now,
            expires_at=release_ts + WEEK,
        )

    def register_arm(self, album_id: str, release_ts: int, now: int) -> ArmState:
        """Prior arm for a windowed album; registering twice returns the existing state."""
        with self._lock:
            existing = self._arms.get(album_id)
            if existing is not None:
                return existing
            arm = self._new_arm(album_id, release_ts, now)
            self._arms = {**self._arms, album_id: arm}
            self._pending[album_id] = []
        logger.debug("Registered arm %s (expires %d)", album_id, arm.expires_at)
        return arm

    def expire_arms(self, now: int) -> list[str]:
        """Remove arms with expires_at <= now, dropping their pending rewards."""
        with self._lock:
            removed = sorted(a for a, arm in self._arms.items() if arm.expires_at <= now)
            if removed:
                discarded = 0
                for album_id in removed:
                    discarded += len(self._pending.pop(album_id, ()))
                self._arms = {a: arm for a, arm in self._arms.items() if arm.expires_at > now}
                if discarded:
                    logger.debug("Discarded %d pending rewards of expired arms", discarded)
        if removed:
            logger.info("Expired %d arms", len(removed))
        return removed

    def record_rewards(self, rewards: Mapping[str, int]) -> int:
        """Queue rewards for the next batch update; rewards for unknown arms are dropped."""
        routed = 0
        with self._lock:
            for album_id, reward in rewards.items():
                buffer = self._pending.get(album_id)
                if buffer is None:
                    self.dropped_rewards += 1
                    continue
                buffer.append(int(reward))
                routed += 1
        return routed

    def batch_update(self) -> Mapping[str, ArmState]:
        with self._lock:
            pending = {a: r for a, r in self._pending.items() if r}
            absorbed = sum(len(r) for r in pending.values())
            self._arms = batch_update(self._arms, pending, self.config.obs_var)
            self._pending = {a: [] for a in self._arms}
            self.version += 1
            arms = self._arms
        logger.info("Bandit batch update v%d: %d rewards over %d arms", self.version, absorbed, len(arms))
        return MappingProxyType(arms)

    def refresh(self, now: int, releases: Mapping[str, int]) -> tuple[list[str], list[str]]:
        """
        One scheduler step: expire, register the windowed albums not yet known,
        then absorb pending rewards. Returns (expired, registered).
        """
        expired = self.expire_arms(now)
        registered = []
        for album_id in sorted(releases):
            if album_id in self._arms:
                continue
            try:
                self.register_arm(album_id, releases[album_id], now)
                registered.append(album_id)
            except ExpiredArmError:
                logger.debug("Skipping %s: outside the new-release window", album_id)
        self.batch_update()
        return expired, registered

    # ---------- persistence ----------

    def export_table(self, path: str) -> None:
        records = [{**arm.to_dict(), "version": self.version} for _, arm in sorted(self._arms.items())]
        safe_write(path, encode_records(records))
        logger.info("Arm table v%d exported (%d arms) to %s", self.version, len(records), path)

    def import_table(self, path: str) -> None:
        arms: dict[str, ArmState] = {}
        version = 0
        for line_no, record in iter_source(path):
            if isinstance(record, FormatError):
                raise FormatError(f"{path}:{line_no}: {record}")
            try:
                arm = ArmState(
                    album_id=str(record["album"]),
                    mu=float(record["mu"]),
                    sigma2=float(record["sigma2"]),
                    n_obs=int(record["n_obs"]),
                    created_at=int(record["created_at"]),
                    expires_at=int(record["expires_at"]),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{line_no}: bad arm record ({e})")
            if not (math.isfinite(arm.mu) and math.isfinite(arm.sigma2)) or arm.sigma2 <= 0 or arm.n_obs < 0:
                raise FormatError(
                    f"{path}:{line_no}: arm {arm.album_id} needs finite mu, sigma2 > 0 and n_obs >= 0"
                )
            arms[arm.album_id] = arm
            version = max(version, int(record.get("version", 0)))
        with self._lock:
            self._arms = arms
            self._pending = {a: [] for a in arms}
            self.version = version
        logger.info("Arm table v%d imported (%d arms)", version, len(arms))
