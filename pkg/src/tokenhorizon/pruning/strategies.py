"""Visual-token selection rules.

Every selector receives the currently alive visual indices (sorted, original
numbering) and returns the sorted subset to keep.  Ties always go to the
smaller original index.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from ..engine.config import ConfigError

STRATEGIES = ("Random", "AttentionTopK", "MaxMinDiversity", "LowDuplication", "Withdraw")
MAX_PIVOTS = 8


def retained_count(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    _check_ratio(ratio)
    return int(math.floor(ratio * n + 0.5))


def _check_ratio(ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"retain ratio must lie in [0, 1], got {ratio}")


def _as_alive(alive) -> np.ndarray:
    alive = np.asarray(sorted(int(a) for a in alive), dtype=np.int64)
    if len(np.unique(alive)) != len(alive):
        raise ConfigError("alive set contains duplicates")
    return alive


def _kept(alive: np.ndarray, positions) -> tuple[int, ...]:
    return tuple(int(a) for a in np.sort(alive[np.asarray(positions, dtype=np.int64)]))


# -- random ------------------------------------------------------------------

def random_subset(alive, count: int, seed: int) -> tuple[int, ...]:
    alive = _as_alive(alive)
    rng = np.random.default_rng(seed)
    return _kept(alive, rng.choice(len(alive), size=count, replace=False))


def select_random(alive, retain_ratio: float, seed: int) -> tuple[int, ...]:
    """Uniform sample without replacement, a pure function of ``seed``."""
    return random_subset(alive, retained_count(retain_ratio, len(alive)), seed)


# -- attention (FastV-style) -------------------------------------------------

def last_row_visual_attention(attn: np.ndarray, n_alive: int, visual_start: int) -> np.ndarray:
    attn = np.asarray(attn)
    if attn.ndim == 1:
        row = attn
        visual_start = 0
    else:
        row = attn[-1]
    if row.shape[0] < visual_start + n_alive:
        raise ConfigError(
            f"attention row has {row.shape[0]} columns; visual block needs "
            f"{visual_start + n_alive}"
        )
    return row[visual_start:visual_start + n_alive]


def attention_topk(scores: np.ndarray, alive, count: int) -> tuple[int, ...]:
    alive = _as_alive(alive)
    order = np.lexsort((alive, -np.asarray(scores, dtype=np.float64)))
    return _kept(alive, order[:count])


def select_attention_topk(attn, alive, retain_ratio: float, visual_start: int = 0):
    """Keep the visual tokens the last text position attends to most.

    ``attn`` is either a head-averaged ``n x n`` matrix (the visual block starts
    at column ``visual_start``) or a vector of scores aligned with ``alive``.
    """
    alive = _as_alive(alive)
    scores = last_row_visual_attention(attn, len(alive), visual_start)
    return attention_topk(scores, alive, retained_count(retain_ratio, len(alive)))


# -- cosine geometry -----------------------------------------------------------

def _unit_rows(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    zero = norms == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} zero-norm feature rows; cosine treated as degenerate",
            RuntimeWarning, stacklevel=3,
        )
    unit = np.divide(features, norms[:, None], out=np.zeros_like(features),
                     where=~zero[:, None])
    return unit, zero


def cosine_distance_matrix(features) -> np.ndarray:
    """``1 - cos`` between rows; pairs involving a zero row get distance 0."""
    unit, zero = _unit_rows(features)
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    dist[zero, :] = 0.0
    dist[:, zero] = 0.0
    np.fill_diagonal(dist, 0.0)
    return dist


def maxmin_diversity(features, alive, count: int) -> tuple[int, ...]:
    alive = _as_alive(alive)
    n = len(alive)
    if features.shape[0] != n:
        raise ConfigError(f"{features.shape[0]} feature rows for {n} alive tokens")
    if count >= n:
        return tuple(int(a) for a in alive)
    if count == 0:
        return ()
    dist = cosine_distance_matrix(features)
    upper = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), dist, -np.inf)
    a, b = np.unravel_index(np.argmax(upper), upper.shape)
    if count == 1:
        return (int(alive[a]),)
    chosen = [a, b]
    nearest = np.minimum(dist[a], dist[b])
    taken = np.zeros(n, dtype=bool)
    taken[chosen] = True
    while len(chosen) < count:
        nxt = int(np.argmax(np.where(taken, -np.inf, nearest)))
        chosen.append(nxt)
        taken[nxt] = True
        nearest = np.minimum(nearest, dist[nxt])
    return _kept(alive, chosen)


def select_maxmin_diversity(features, alive, retain_ratio: float) -> tuple[int, ...]:
    """Greedy farthest-first subset under cosine distance, seeded with the diameter pair."""
    return maxmin_diversity(np.asarray(features), alive,
                            retained_count(retain_ratio, len(alive)))


def duplication_scores(features, pivots) -> np.ndarray:
    """Max cosine similarity of every row to the pivot rows (zero rows count as duplicates)."""
    unit, zero = _unit_rows(features)
    sims = unit @ unit[np.asarray(pivots, dtype=np.int64)].T
    scores = sims.max(axis=1) if len(pivots) else np.zeros(len(unit))
    scores[zero] = 1.0
    return scores


def low_duplication(features, alive, count: int, seed: int) -> tuple[int, ...]:
    alive = _as_alive(alive)
    n = len(alive)
    if features.shape[0] != n:
        raise ConfigError(f"{features.shape[0]} feature rows for {n} alive tokens")
    n_pivots = min(MAX_PIVOTS, n, count)
    rng = np.random.default_rng(seed)
    pivots = np.sort(rng.choice(n, size=n_pivots, replace=False))
    scores = duplication_scores(features, pivots)
    rest = np.setdiff1d(np.arange(n), pivots)
    order = rest[np.lexsort((rest, scores[rest]))]
    return _kept(alive, np.concatenate([pivots, order[:count - n_pivots]]))


def select_low_duplication(features, alive, retain_ratio: float, seed: int):
    """DART-style: keep seeded pivots, then the tokens least similar to any pivot."""
    return low_duplication(np.asarray(features), alive,
                           retained_count(retain_ratio, len(alive)), seed)


def select_withdraw(alive, retain_ratio: float = 0.0) -> tuple[int, ...]:
    if retain_ratio != 0:
        raise ConfigError("Withdraw requires retain_ratio = 0")
    return ()
