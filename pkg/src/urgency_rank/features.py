"""Domain records for slates and their conversion to model inputs.

Encoding happens in two stages. :func:`slate_arrays` turns a :class:`Slate`
into plain numpy arrays (categorical ids, log-scaled numerics, Δt buckets); this
is parameter-free and is cached once per dataset. :func:`history_tensor` and
:func:`candidate_tensor` then look up embeddings and concatenate, which is the
differentiable part. The single-item helpers (``encode_history_action``,
``encode_candidate``, ``encode_slate``) run the same batched code with a
batch of one.
"""
from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

CANDIDATE_WINDOW = 86400  # seconds; candidates start within the next 24 hours

KINDS = ("click", "team_save", "contest_join")

N_HIST_NUMERIC = 5
N_CAND_NUMERIC = 4


class TemporalOrderError(ValueError):
    pass


class WindowViolationError(ValueError):
    pass


class SlateInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class ContestJoin:
    num_contests: int
    total_entry_fee: float

    def __post_init__(self):
        if self.num_contests < 1 or self.total_entry_fee < 0:
            raise ValueError("contest join needs num_contests >= 1 and entry fee >= 0")


@dataclass(frozen=True)
class HistoricalAction:
    sport: str
    format: str
    t: int
    kind: str  # one of KINDS
    ttrl_at_action: float
    lineups_out: bool
    max_prize: float
    join: ContestJoin | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if (self.kind == "contest_join") != (self.join is not None):
            raise ValueError("contest_join actions (and only those) carry join enrichment")


@dataclass(frozen=True)
class CandidateFeatures:
    sport: str
    format: str
    ttrl: float
    time_since_lineups: float | None
    max_prize: float


@dataclass(frozen=True)
class Slate:
    user_id: str
    t_c: int
    history: tuple[HistoricalAction, ...]
    candidates: tuple[CandidateFeatures, ...]
    labels: tuple[int, ...]

    @property
    def label(self) -> int:
        return self.labels.index(1)

    def check(self, m_max: int | None = None) -> None:
        """Raise :class:`SlateInvariantError` on the first violated invariant."""
        m = len(self.candidates)
        if m < 2 or (m_max is not None and m > m_max):
            raise SlateInvariantError(f"slate has {m} candidates")
        if len(self.labels) != m or sorted(self.labels) != [0] * (m - 1) + [1]:
            raise SlateInvariantError("labels must contain exactly one positive")
        for c in self.candidates:
            if not 0 < c.ttrl <= CANDIDATE_WINDOW:
                raise SlateInvariantError(f"candidate ttrl {c.ttrl} outside (0, {CANDIDATE_WINDOW}]")
        ts = [a.t for a in self.history]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise SlateInvariantError("history timestamps must be non-decreasing")
        if ts and ts[-1] >= self.t_c:
            raise SlateInvariantError("history must strictly precede the request time")


DEFAULT_SPORTS = ("cricket", "football", "kabaddi", "basketball", "hockey")
DEFAULT_FORMATS = ("t10", "t20", "odi", "test", "league")


@dataclass(frozen=True)
class EncodingConfig:
    h_max: int = 50
    m_max: int = 20
    delta_t_buckets: tuple[float, ...] = (60, 600, 3600, 21600, 86400, 604800, 2592000)
    sports: tuple[str, ...] = DEFAULT_SPORTS
    formats: tuple[str, ...] = DEFAULT_FORMATS
    sport_dim: int = 4
    format_dim: int = 4
    kind_dim: int = 3
    bucket_dim: int = 4
    log_scale: float = 0.3  # multiplier applied after log1p
    # log1p(ttrl) and log1p(prize) are centred before scaling; uncentred inputs
    # near a common offset leave the first layer badly conditioned
    ttrl_center: float = math.log1p(43200.0)
    prize_center: float = math.log1p(1e5)
    use_urgency_features: bool = True
    use_positional_encoding: bool = True

    def __post_init__(self):
        b = self.delta_t_buckets
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("delta_t_buckets must be strictly increasing")
        if self.h_max < 1 or self.m_max < 2:
            raise ValueError("h_max >= 1 and m_max >= 2 required")

    @property
    def n_buckets(self) -> int:
        return len(self.delta_t_buckets) + 1

    @property
    def d_history(self) -> int:
        d = self.sport_dim + self.format_dim + self.kind_dim + N_HIST_NUMERIC
        if self.use_positional_encoding:
            d += self.bucket_dim + 1
        return d

    @property
    def d_candidate(self) -> int:
        return self.sport_dim + self.format_dim + N_CAND_NUMERIC

    def sport_id(self, name: str) -> int:
        # id 0 is reserved for out-of-vocabulary values
        try:
            return self.sports.index(name) + 1
        except ValueError:
            return 0

    def format_id(self, name: str) -> int:
        try:
            return self.formats.index(name) + 1
        except ValueError:
            return 0


def delta_t_bucket(dt, boundaries: Sequence[float]):
    """Index of the first boundary strictly greater than ``dt`` (len(boundaries) if none)."""
    return np.searchsorted(np.asarray(boundaries, dtype=np.float64), dt, side="right")


@dataclass
class SlateArrays:
    """Parameter-free numeric view of one slate (history right-aligned, unpadded)."""

    hist_cat: np.ndarray  # (h, 3) sport, format, kind ids
    hist_num: np.ndarray  # (h, 5)
    hist_bucket: np.ndarray  # (h,)
    hist_dt: np.ndarray  # (h,) log-scaled Δt
    cand_cat: np.ndarray  # (m, 2)
    cand_num: np.ndarray  # (m, 4)
    labels: np.ndarray  # (m,)

    @property
    def n_hist(self) -> int:
        return len(self.hist_bucket)

    @property
    def n_cand(self) -> int:
        return len(self.labels)


def _history_rows(actions: Sequence[HistoricalAction], t_c: int, cfg: EncodingConfig):
    h = len(actions)
    cat = np.zeros((h, 3), dtype=np.int64)
    num = np.zeros((h, N_HIST_NUMERIC))
    dt = np.zeros(h)
    s = cfg.log_scale
    for j, a in enumerate(actions):
        if a.t > t_c:
            raise TemporalOrderError(f"action at t={a.t} is after request time {t_c}")
        cat[j] = (cfg.sport_id(a.sport), cfg.format_id(a.format), KINDS.index(a.kind))
        nc, fee = (a.join.num_contests, a.join.total_entry_fee) if a.join else (0, 0.0)
        num[j] = (s * (np.log1p(a.ttrl_at_action) - cfg.ttrl_center), float(a.lineups_out),
                  s * (np.log1p(a.max_prize) - cfg.prize_center), s * np.log1p(nc), s * np.log1p(fee))
        dt[j] = t_c - a.t
    return cat, num, delta_t_bucket(dt, cfg.delta_t_buckets).astype(np.int64), s * np.log1p(dt)


def _candidate_rows(cands: Sequence[CandidateFeatures], cfg: EncodingConfig):
    m = len(cands)
    cat = np.zeros((m, 2), dtype=np.int64)
    num = np.zeros((m, N_CAND_NUMERIC))
    s = cfg.log_scale
    for i, c in enumerate(cands):
        if not 0 < c.ttrl <= CANDIDATE_WINDOW:
            raise WindowViolationError(f"candidate ttrl {c.ttrl} outside (0, {CANDIDATE_WINDOW}]")
        cat[i] = (cfg.sport_id(c.sport), cfg.format_id(c.format))
        if cfg.use_urgency_features:
            announced = c.time_since_lineups is not None
            tsl = c.time_since_lineups if announced else 0.0
            num[i, :3] = (s * (np.log1p(c.ttrl) - cfg.ttrl_center), float(announced), s * np.log1p(tsl))
        num[i, 3] = s * (np.log1p(c.max_prize) - cfg.prize_center)
    return cat, num


def slate_arrays(slate: Slate, cfg: EncodingConfig) -> SlateArrays:
    hist = slate.history[-cfg.h_max:]
    hc, hn, hb, hd = _history_rows(hist, slate.t_c, cfg)
    cc, cn = _candidate_rows(slate.candidates, cfg)
    return SlateArrays(hc, hn, hb, hd, cc, cn, np.asarray(slate.labels, dtype=np.float64))


@dataclass
class Batch:
    """Padded stack of slates. History is right-aligned; candidates left-aligned."""

    hist_cat: np.ndarray  # (B, H, 3)
    hist_num: np.ndarray  # (B, H, 5)
    hist_bucket: np.ndarray  # (B, H)
    hist_dt: np.ndarray  # (B, H)
    hist_mask: np.ndarray  # (B, H) bool
    cand_cat: np.ndarray  # (B, M, 2)
    cand_num: np.ndarray  # (B, M, 4)
    cand_mask: np.ndarray  # (B, M) bool
    labels: np.ndarray  # (B, M)

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def collate(items: Sequence[SlateArrays], h_pad: int | None = None, m_pad: int | None = None) -> Batch:
    """Pad to the longest history/candidate list in ``items`` (or the given widths)."""
    B = len(items)
    H = max(1, max(a.n_hist for a in items)) if h_pad is None else h_pad
    M = max(a.n_cand for a in items) if m_pad is None else m_pad
    hc = np.zeros((B, H, 3), dtype=np.int64)
    hn = np.zeros((B, H, N_HIST_NUMERIC))
    hb = np.zeros((B, H), dtype=np.int64)
    hd = np.zeros((B, H))
    hm = np.zeros((B, H), dtype=bool)
    cc = np.zeros((B, M, 2), dtype=np.int64)
    cn = np.zeros((B, M, N_CAND_NUMERIC))
    cm = np.zeros((B, M), dtype=bool)
    y = np.zeros((B, M))
    for b, a in enumerate(items):
        h, m = a.n_hist, a.n_cand
        if h:
            hc[b, H - h:] = a.hist_cat
            hn[b, H - h:] = a.hist_num
            hb[b, H - h:] = a.hist_bucket
            hd[b, H - h:] = a.hist_dt
            hm[b, H - h:] = True
        cc[b, :m] = a.cand_cat
        cn[b, :m] = a.cand_num
        cm[b, :m] = True
        y[b, :m] = a.labels
    return Batch(hc, hn, hb, hd, hm, cc, cn, cm, y)


def history_tensor(batch: Batch, params, cfg: EncodingConfig) -> ad.Tensor:
    """Differentiable history encodings, shape (B, H, d_history); padded rows are zero."""
    parts = [
        ad.embedding(params["emb.sport"], batch.hist_cat[..., 0]),
        ad.embedding(params["emb.format"], batch.hist_cat[..., 1]),
        ad.embedding(params["emb.kind"], batch.hist_cat[..., 2]),
        ad.Tensor(batch.hist_num),
    ]
    if cfg.use_positional_encoding:
        parts.append(ad.embedding(params["emb.dt_bucket"], batch.hist_bucket))
        parts.append(ad.Tensor(batch.hist_dt[..., None]))
    out = ad.concat(parts, axis=-1)
    return out * batch.hist_mask[..., None].astype(np.float64)


def candidate_tensor(batch: Batch, params, cfg: EncodingConfig) -> ad.Tensor:
    """Differentiable candidate encodings, shape (B, M, d_candidate)."""
    return ad.concat([
        ad.embedding(params["emb.sport"], batch.cand_cat[..., 0]),
        ad.embedding(params["emb.format"], batch.cand_cat[..., 1]),
        ad.Tensor(batch.cand_num),
    ], axis=-1)


def encode_history_action(a: HistoricalAction, t_c: int, cfg: EncodingConfig, params) -> ad.Tensor:
    cat, num, bucket, dt = _history_rows([a], t_c, cfg)
    cc = np.zeros((1, 2), dtype=np.int64)
    batch = Batch(cat[None], num[None], bucket[None], dt[None], np.ones((1, 1), dtype=bool),
                  cc[None], np.zeros((1, 1, N_CAND_NUMERIC)), np.ones((1, 1), dtype=bool),
                  np.zeros((1, 1)))
    return history_tensor(batch, params, cfg)[0, 0]


def encode_candidate(c: CandidateFeatures, cfg: EncodingConfig, params) -> ad.Tensor:
    cat, num = _candidate_rows([c], cfg)
    batch = Batch(np.zeros((1, 1, 3), dtype=np.int64), np.zeros((1, 1, N_HIST_NUMERIC)),
                  np.zeros((1, 1), dtype=np.int64), np.zeros((1, 1)), np.zeros((1, 1), dtype=bool),
                  cat[None], num[None], np.ones((1, 1), dtype=bool), np.zeros((1, 1)))
    return candidate_tensor(batch, params, cfg)[0, 0]


def encode_slate(slate: Slate, cfg: EncodingConfig, params):
    """Returns ``(H, mask, Z, y)`` with history padded to ``cfg.h_max``."""
    batch = collate([slate_arrays(slate, cfg)], h_pad=cfg.h_max)
    H = history_tensor(batch, params, cfg)[0]
    Z = candidate_tensor(batch, params, cfg)[0]
    return H, batch.hist_mask[0], Z, ad.Tensor(batch.labels[0])
