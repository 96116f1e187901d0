import numpy as np
import pytest

from urgency_rank.features import CandidateFeatures, ContestJoin, EncodingConfig, HistoricalAction, Slate
from urgency_rank.model import ModelConfig, init_params

T_C = 1_700_100_000


def make_action(t, kind="click", sport="cricket", fmt="t20", ttrl=3600.0, lineups=False, prize=1e5):
    join = ContestJoin(2, 120.0) if kind == "contest_join" else None
    return HistoricalAction(sport, fmt, t, kind, ttrl, lineups, prize, join)


def make_candidate(ttrl=1800.0, sport="cricket", fmt="t20", tsl=None, prize=5e4):
    return CandidateFeatures(sport, fmt, ttrl, tsl, prize)


def random_slate(rng, n_hist=None, m=None, t_c=T_C, user="u1"):
    sports, formats = ("cricket", "football", "kabaddi"), ("t10", "t20", "odi")
    n_hist = int(rng.integers(0, 6)) if n_hist is None else n_hist
    m = int(rng.integers(2, 7)) if m is None else m
    ts = np.sort(t_c - rng.integers(1, 10 * 86400, size=n_hist))
    kinds = ("click", "team_save", "contest_join")
    hist = tuple(
        make_action(int(t), kinds[rng.integers(3)], sports[rng.integers(3)], formats[rng.integers(3)],
                    float(rng.integers(60, 86400)), bool(rng.random() < 0.3), float(rng.integers(100, 10**6)))
        for t in ts)
    cands = tuple(
        make_candidate(float(rng.integers(1, 86401)), sports[rng.integers(3)], formats[rng.integers(3)],
                       None if rng.random() < 0.5 else float(rng.integers(0, 7200)), float(rng.integers(100, 10**6)))
        for _ in range(m))
    pos = int(rng.integers(m))
    return Slate(user, t_c, hist, cands, tuple(int(i == pos) for i in range(m)))


@pytest.fixture
def small_cfg():
    """A narrow model so finite-difference checks stay fast."""
    return ModelConfig(encoding=EncodingConfig(h_max=6, m_max=8), attention_hidden=5, mlp_hidden=(7, 4))


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, seed=3)


@pytest.fixture
def full_cfg():
    return ModelConfig(encoding=EncodingConfig(h_max=8))


@pytest.fixture
def full_params(full_cfg):
    return init_params(full_cfg, seed=11)


# one line per acceptance criterion, printed after the run by the hook below
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
