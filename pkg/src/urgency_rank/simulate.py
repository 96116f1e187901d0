"""Synthetic DFS users, match schedules and click streams with known ground truth.

Users click exactly one match per request; the click is sampled from a softmax
over the request's candidate set whose logits combine

* sport affinity (a per-user Dirichlet vector),
* urgency: ``beta_u * (1 - log1p(ttrl/60)/log1p(1440) + lineup_boost * lineups_out)``,
* prize appetite (power users only),
* momentum: recency-decayed similarity to the user's visible history, with a
  per-user half-life.

:func:`click_logits` depends only on the slate and the user's latent
parameters, so click probabilities can be recomputed exactly from emitted data.

All randomness comes from Philox generators keyed by ``(seed, stream id)``; per-user
streams are independent of the number of users simulated before them.
"""
from __future__ import annotations

import bisect
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from .features import CANDIDATE_WINDOW, ContestJoin, CandidateFeatures, HistoricalAction, Slate

log = logging.getLogger(__name__)

T0 = 1_700_000_000  # simulated epoch start (unix seconds)
DAY = 86400

KIND_WEIGHT = {"click": 1.0, "team_save": 1.5, "contest_join": 2.0}

_SCHEDULE_STREAM = 1
_SPLIT_STREAM = 2
_USER_STREAM = 3


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_users: int = 10_000
    n_matches: int = 5_000
    horizon_days: float = 90.0
    sports: tuple[str, ...] = ("cricket", "football", "kabaddi", "basketball", "hockey")
    sport_weights: tuple[float, ...] = (0.45, 0.25, 0.12, 0.12, 0.06)
    formats: tuple[str, ...] = ("t10", "t20", "odi", "test", "league")
    format_weights: tuple[float, ...] = (0.15, 0.35, 0.15, 0.05, 0.30)
    power_fraction: float = 0.3
    beta_power: tuple[float, float] = (4.0, 7.0)
    beta_casual: tuple[float, float] = (2.5, 5.0)
    half_life_power_hours: tuple[float, float] = (0.25, 2.0)
    half_life_casual_hours: tuple[float, float] = (0.5, 4.0)
    prize_sensitivity_power: tuple[float, float] = (0.3, 0.8)
    affinity_concentration: float = 0.6
    affinity_strength: float = 3.0
    momentum_weight: float = 1.5
    lineup_boost: float = 0.5
    prize_log_mean: float = 11.5  # log of ~1e5
    prize_log_sigma: float = 1.0
    fee_log_mean: float = 3.9  # log of ~50
    fee_log_sigma: float = 1.0
    p_team_save: float = 0.5
    p_contest_join: float = 0.5
    slate_size: tuple[int, int] = (4, 12)
    sessions_per_user: tuple[int, int] = (3, 8)
    requests_per_session: tuple[int, int] = (1, 4)
    request_gap_minutes: tuple[float, float] = (2.0, 30.0)
    h_max: int = 50
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_times: tuple[float, float] = (0.6, 0.8)  # train end, validation end (fractions of horizon)

    def __post_init__(self):
        for name in ("sport_weights", "format_weights", "split_fractions"):
            w = getattr(self, name)
            if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
                raise SimConfigError(f"{name} must be non-negative and sum to 1")
        if len(self.sport_weights) != len(self.sports) or len(self.format_weights) != len(self.formats):
            raise SimConfigError("vocabulary and weight lengths differ")
        for name in ("beta_power", "beta_casual", "half_life_power_hours", "half_life_casual_hours",
                     "prize_sensitivity_power", "slate_size", "sessions_per_user",
                     "requests_per_session", "request_gap_minutes"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise SimConfigError(f"{name} range is inverted")
        if self.slate_size[0] < 2:
            raise SimConfigError("slates need at least 2 candidates")
        if not 0 <= self.power_fraction <= 1:
            raise SimConfigError("power_fraction must lie in [0, 1]")
        if self.horizon_days <= 0 or self.n_matches < 1:
            raise SimConfigError("horizon and match count must be positive")
        a, b = self.split_times
        if not 0 < a < b < 1:
            raise SimConfigError("split_times must satisfy 0 < train_end < val_end < 1")

    @property
    def horizon(self) -> int:
        return int(self.horizon_days * DAY)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=stream)))


def _lognormal(rng, mu, sigma, size=None):
    return np.exp(mu + sigma * ndtri(rng.random(size)))


def _categorical(rng, weights, size=None):
    cdf = np.cumsum(weights)
    return np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), len(weights) - 1)


def _uniform(rng, lo, hi):
    return lo + (hi - lo) * rng.random()


def _int_between(rng, lo, hi):
    return int(lo + np.floor(rng.random() * (hi - lo + 1)))


@dataclass
class Schedule:
    sport: np.ndarray  # (n,) index into cfg.sports
    format: np.ndarray
    start: np.ndarray  # round lock, sorted ascending
    lineup: np.ndarray  # lineup announcement time
    prize: np.ndarray

    def __len__(self) -> int:
        return len(self.start)


def generate_matches(cfg: SimConfig) -> Schedule:
    """Match schedule spanning the horizon plus one candidate window."""
    rng = _rng(cfg.seed, _SCHEDULE_STREAM)
    n = cfg.n_matches
    start = np.sort(T0 + np.floor(rng.random(n) * (cfg.horizon + DAY))).astype(np.int64)
    sport = _categorical(rng, cfg.sport_weights, n)
    fmt = _categorical(rng, cfg.format_weights, n)
    lineup = start - np.floor(60 * (15 + 105 * rng.random(n))).astype(np.int64)
    prize = np.round(_lognormal(rng, cfg.prize_log_mean, cfg.prize_log_sigma, n), 2)
    return Schedule(sport, fmt, start, lineup, prize)


@dataclass
class UserTruth:
    user_id: str
    power: bool
    affinity: dict[str, float]
    beta: float
    half_life: float  # seconds
    prize_sensitivity: float


def sample_user(cfg: SimConfig, idx: int) -> UserTruth:
    rng = _rng(cfg.seed, _USER_STREAM, idx, 0)
    power = bool(rng.random() < cfg.power_fraction)
    aff = rng.dirichlet(np.full(len(cfg.sports), cfg.affinity_concentration))
    if power:
        beta = _uniform(rng, *cfg.beta_power)
        hl = _uniform(rng, *cfg.half_life_power_hours)
        rho = _uniform(rng, *cfg.prize_sensitivity_power)
    else:
        beta = _uniform(rng, *cfg.beta_casual)
        hl = _uniform(rng, *cfg.half_life_casual_hours)
        rho = 0.0
    return UserTruth(f"u{idx:06d}", power, dict(zip(cfg.sports, map(float, aff))), float(beta), 3600.0 * hl, float(rho))


def urgency(ttrl, lineups_out, lineup_boost: float):
    return 1.0 - np.log1p(np.asarray(ttrl, dtype=np.float64) / 60.0) / np.log1p(1440.0) + lineup_boost * np.asarray(lineups_out, dtype=np.float64)


def click_logits(user: UserTruth, slate: Slate, cfg: SimConfig) -> np.ndarray:
    """Ground-truth click logits for the slate's candidates (softmax gives click probabilities)."""
    cands = slate.candidates
    sport = [c.sport for c in cands]
    aff = np.array([user.affinity.get(s, 0.0) for s in sport])
    ttrl = np.array([c.ttrl for c in cands], dtype=np.float64)
    lineups = np.array([c.time_since_lineups is not None for c in cands])
    prize_z = (np.log([c.max_prize for c in cands]) - cfg.prize_log_mean) / cfg.prize_log_sigma
    out = cfg.affinity_strength * aff + user.beta * urgency(ttrl, lineups, cfg.lineup_boost) + user.prize_sensitivity * prize_z
    if slate.history:
        h = slate.history
        w = np.array([KIND_WEIGHT[a.kind] for a in h]) * np.exp2(-(slate.t_c - np.array([a.t for a in h])) / user.half_life)
        hs = np.array([a.sport for a in h])
        hf = np.array([a.format for a in h])
        cs = np.array(sport)
        cf = np.array([c.format for c in cands])
        same_sport = cs[:, None] == hs[None, :]
        sim = 0.5 * same_sport + 0.5 * (same_sport & (cf[:, None] == hf[None, :]))
        out = out + cfg.momentum_weight * (sim @ w)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def _request_times(rng, cfg: SimConfig) -> list[int]:
    times = set()
    for _ in range(_int_between(rng, *cfg.sessions_per_user)):
        t = T0 + rng.random() * cfg.horizon
        for r in range(_int_between(rng, *cfg.requests_per_session)):
            if r:
                t += 60.0 * _uniform(rng, *cfg.request_gap_minutes)
            if t < T0 + cfg.horizon:
                times.add(int(t))
    return sorted(times)


@dataclass
class UserStream:
    truth: UserTruth
    slates: list[Slate]
    click_logprob: list[float]
    actions: list[HistoricalAction]
    skipped: int = 0


def _action(schedule: Schedule, cfg: SimConfig, j: int, t: int, kind: str, join=None) -> HistoricalAction:
    return HistoricalAction(
        sport=cfg.sports[schedule.sport[j]], format=cfg.formats[schedule.format[j]], t=int(t), kind=kind,
        ttrl_at_action=float(schedule.start[j] - t), lineups_out=bool(t >= schedule.lineup[j]),
        max_prize=float(schedule.prize[j]), join=join)


def simulate_user_stream(user_idx: int, schedule: Schedule, cfg: SimConfig, truth: UserTruth | None = None) -> UserStream:
    """Simulate one user's requests over the horizon, emitting one slate per click."""
    truth = truth or sample_user(cfg, user_idx)
    rng = _rng(cfg.seed, _USER_STREAM, user_idx, 1)
    actions: list[HistoricalAction] = []
    stream = UserStream(truth, [], [], actions)
    for t_c in _request_times(rng, cfg):
        lo = bisect.bisect_right(schedule.start, t_c)
        hi = bisect.bisect_right(schedule.start, t_c + CANDIDATE_WINDOW)
        m = min(_int_between(rng, *cfg.slate_size), hi - lo)
        if m < 2:
            stream.skipped += 1
            continue
        chosen = lo + rng.choice(hi - lo, size=m, replace=False)
        cands = tuple(
            CandidateFeatures(
                sport=cfg.sports[schedule.sport[j]], format=cfg.formats[schedule.format[j]],
                ttrl=float(schedule.start[j] - t_c),
                time_since_lineups=float(t_c - schedule.lineup[j]) if t_c >= schedule.lineup[j] else None,
                max_prize=float(schedule.prize[j]))
            for j in chosen)
        n_visible = bisect.bisect_left([a.t for a in actions], t_c)
        history = tuple(actions[max(0, n_visible - cfg.h_max):n_visible])
        draft = Slate(truth.user_id, t_c, history, cands, (1,) + (0,) * (m - 1))
        lp = log_softmax(click_logits(truth, draft, cfg))
        cdf = np.cumsum(np.exp(lp))
        k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), m - 1)
        labels = tuple(int(i == k) for i in range(m))
        stream.slates.append(Slate(truth.user_id, t_c, history, cands, labels))
        stream.click_logprob.append(float(lp[k]))

        j = chosen[k]
        new = [_action(schedule, cfg, j, t_c, "click")]
        t = t_c
        if rng.random() < cfg.p_team_save:
            t = t + 60 + int(540 * rng.random())
            if t < schedule.start[j]:
                new.append(_action(schedule, cfg, j, t, "team_save"))
                if rng.random() < cfg.p_contest_join:
                    t = t + 60 + int(540 * rng.random())
                    n_contests = 1 + int(np.floor(np.log(1.0 - rng.random()) / np.log(0.5)))
                    fee = float(np.round(n_contests * _lognormal(rng, cfg.fee_log_mean, cfg.fee_log_sigma), 2))
                    if t < schedule.start[j]:
                        new.append(_action(schedule, cfg, j, t, "contest_join", ContestJoin(n_contests, fee)))
        for a in new:
            bisect.insort(actions, a, key=lambda x: x.t)
    return stream


@dataclass
class Dataset:
    """Generated data plus ground truth; slates are ordered by (user_id, t_c)."""

    config: SimConfig
    slates: list[Slate]
    truth: dict[str, UserTruth]
    click_logprob: dict[tuple[str, int], float] = field(repr=False)
    skipped: int = 0


def generate(cfg: SimConfig) -> Dataset:
    schedule = generate_matches(cfg)
    slates, truth, logp, skipped = [], {}, {}, 0
    for u in range(cfg.n_users):
        s = simulate_user_stream(u, schedule, cfg)
        truth[s.truth.user_id] = s.truth
        slates.extend(s.slates)
        logp.update({(sl.user_id, sl.t_c): lp for sl, lp in zip(s.slates, s.click_logprob)})
        skipped += s.skipped
    if skipped:
        log.info("skipped %d requests with fewer than 2 candidates", skipped)
    return Dataset(cfg, slates, truth, logp, skipped)


def assign_users(users, cfg: SimConfig) -> dict[str, int]:
    """Map each user id to 0 (train), 1 (validation) or 2 (test) by a seeded permutation."""
    users = sorted(set(users))
    if len(users) < 3:
        raise SimConfigError("need at least 3 users to split")
    n_train = int(round(cfg.split_fractions[0] * len(users)))
    n_val = int(round(cfg.split_fractions[1] * len(users)))
    if n_train < 1 or n_val < 1 or len(users) - n_train - n_val < 1:
        raise SimConfigError(f"degenerate split for {len(users)} users: {n_train}/{n_val}")
    perm = _rng(cfg.seed, _SPLIT_STREAM).permutation(len(users))
    return {users[i]: 0 if rank < n_train else (1 if rank < n_train + n_val else 2) for rank, i in enumerate(perm)}


def split_dataset(slates: list[Slate], cfg: SimConfig) -> tuple[list[Slate], list[Slate], list[Slate]]:
    """Disjoint-user, out-of-time split.

    Train users keep slates before the train end, validation users those in
    ``[train_end, val_end)``, test users those at or after ``val_end``.
    """
    group = assign_users((s.user_id for s in slates), cfg)
    t1 = T0 + int(cfg.split_times[0] * cfg.horizon)
    t2 = T0 + int(cfg.split_times[1] * cfg.horizon)
    out: tuple[list, list, list] = ([], [], [])
    for s in slates:
        g = group[s.user_id]
        if (g == 0 and s.t_c < t1) or (g == 1 and t1 <= s.t_c < t2) or (g == 2 and s.t_c >= t2):
            out[g].append(s)
    return out


def truth_to_dict(ds: Dataset) -> dict:
    return {
        "users": {uid: asdict(t) for uid, t in sorted(ds.truth.items())},
        "clicks": [[uid, t, lp] for (uid, t), lp in sorted(ds.click_logprob.items())],
        "skipped_requests": ds.skipped,
    }


def truth_from_dict(d: dict) -> dict[str, UserTruth]:
    return {uid: UserTruth(**v) for uid, v in d["users"].items()}
