"""Relative transition quality and the conservatism gaps derived from it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FORMAT_VERSION, DatasetStats, Episode, OfflineDataset, discounted_returns, normalize


@dataclass(frozen=True)
class QualityAnnotation:
    episode_id: int
    step_index: int
    g: float
    g_norm: float
    r_norm: float
    m: float


@dataclass(frozen=True)
class GapPair:
    d_ord: float
    d_cql: float


def _rewards(episode: Episode | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(episode, Episode):
        return episode.rewards
    r = np.asarray(episode, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("expected a non-empty 1-D reward sequence")
    return r


def mc_returns(episode: Episode | Sequence[float], gamma: float) -> np.ndarray:
    """Discounted Monte Carlo return from every step to the end of the episode."""
    return discounted_returns(_rewards(episode), gamma)


def nstep_sarsa_returns(episode: Episode | Sequence[float], n: int | float, gamma: float) -> np.ndarray:
    """Reward-only n-step return, truncated at the episode end (no bootstrap)."""
    if not n >= 1:
        raise ValueError("n must be >= 1")
    r = _rewards(episode)
    T = len(r)
    if n >= T:
        return discounted_returns(r, gamma)
    n = int(n)
    out = np.empty(T)
    powers = gamma ** np.arange(n)
    for t in range(T):
        seg = r[t:t + n]
        out[t] = float(np.dot(powers[:len(seg)], seg)) if len(seg) > 1 else seg[0]
    return out


def quality_values(g_norm: np.ndarray, r_norm: np.ndarray, lam: float) -> np.ndarray:
    return lam * np.asarray(g_norm) + (1.0 - lam) * np.asarray(r_norm)


def annotate_dataset(
    dataset: OfflineDataset,
    stats: DatasetStats,
    lam: float,
    mode: str = "lambda-mix",
    nstep: int | None = None,
    gamma: float | None = None,
) -> list[QualityAnnotation]:
    """One annotation per transition, ordered by (episode_id, step_index).

    In ``nstep-sarsa`` mode the long-horizon term is the n-step return, normalized by
    its own dataset-wide range; the reward term is unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    gamma = dataset.gamma if gamma is None else gamma
    if mode == "lambda-mix":
        per_ep = [mc_returns(ep, gamma) for ep in dataset.episodes]
        g = np.concatenate(per_ep)
        g_lo, g_hi = stats.g_min, stats.g_max
    elif mode == "nstep-sarsa":
        if nstep is None:
            raise ValueError("nstep-sarsa mode requires nstep")
        g = np.concatenate([nstep_sarsa_returns(ep, nstep, gamma) for ep in dataset.episodes])
        g_lo, g_hi = float(g.min()), float(g.max())
    else:
        raise ValueError(f"unknown quality mode {mode!r}")
    r = dataset.arrays["rewards"]
    g_norm = normalize(g, g_lo, g_hi)
    r_norm = normalize(r, stats.r_min, stats.r_max)
    m = np.clip(quality_values(g_norm, r_norm, lam), 0.0, 1.0)
    eids = dataset.arrays["episode_ids"]
    steps = dataset.arrays["step_indices"]
    return [
        QualityAnnotation(int(eids[i]), int(steps[i]), float(g[i]), float(g_norm[i]), float(r_norm[i]), float(m[i]))
        for i in range(len(r))
    ]


def quality_array(annotations: Sequence[QualityAnnotation]) -> np.ndarray:
    return np.array([a.m for a in annotations], dtype=np.float64)


def ood_quality(m_in, a_ood, a_in):
    """Quality of an action sampled off the dataset, anchored at the dataset action.

    The L2 distance is scaled by 1/sqrt(d) so that it lies in [0, 2] for actions in
    [-1, 1]^d. Broadcasts over leading axes; the last axis of the actions is d.
    """
    a_ood = np.asarray(a_ood, dtype=np.float64)
    a_in = np.asarray(a_in, dtype=np.float64)
    if a_ood.shape[-1] != a_in.shape[-1]:
        raise ValueError(f"action dimension mismatch: {a_ood.shape[-1]} vs {a_in.shape[-1]}")
    d = a_ood.shape[-1]
    dist = np.sqrt(np.sum((a_ood - a_in) ** 2, axis=-1))
    x2 = np.clip(2.0 * dist / (2.0 * math.sqrt(d)), 0.0, 2.0)
    out = 0.5 * (np.asarray(m_in, dtype=np.float64) - 0.5 * x2 + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def gaps(m, r_max: float):
    """Target distances below the ordinary Q and above the CQL Q."""
    m_arr = np.asarray(m, dtype=np.float64)
    if np.any(m_arr < 0.0) or np.any(m_arr > 1.0):
        raise ValueError("m must lie in [0, 1]")
    d_ord = (1.0 - m_arr) * r_max
    d_cql = m_arr * r_max
    if m_arr.ndim == 0:
        return GapPair(float(d_ord), float(d_cql))
    return d_ord, d_cql


# --- sidecar file ------------------------------------------------------------------

def save_sidecar(path: str | Path, annotations: Sequence[QualityAnnotation], lam: float, mode: str,
                 extra_header: dict | None = None) -> None:
    header = {"version": FORMAT_VERSION, "lambda": lam, "mode": mode}
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, separators=(",", ":"))]
    for a in annotations:
        lines.append(json.dumps(
            {"eps": a.episode_id, "t": a.step_index, "g": a.g, "g_norm": a.g_norm, "r_norm": a.r_norm, "m": a.m},
            separators=(",", ":"),
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_sidecar(path: str | Path) -> tuple[dict, list[QualityAnnotation]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError("missing header")
    header = json.loads(lines[0])
    rows = []
    for line in lines[1:]:
        d = json.loads(line)
        rows.append(QualityAnnotation(d["eps"], d["t"], d["g"], d["g_norm"], d["r_norm"], d["m"]))
    return header, rows
