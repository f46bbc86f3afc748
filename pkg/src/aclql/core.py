"""Dataset types, JSONL persistence, dataset statistics and run configuration."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not conform to the JSONL format."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Transition:
    state: tuple[float, ...]
    action: tuple[float, ...]
    reward: float
    next_state: tuple[float, ...]
    done: bool
    episode_id: int
    step_index: int


@dataclass(frozen=True)
class Episode:
    transitions: tuple[Transition, ...]

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("episode must contain at least one transition")
        for i, tr in enumerate(self.transitions):
            if tr.step_index != i:
                raise ValueError(f"non-contiguous step index {tr.step_index} at position {i}")
            if tr.done and i != len(self.transitions) - 1:
                raise ValueError("only the last transition of an episode may be done")

    @property
    def terminal(self) -> bool:
        return self.transitions[-1].done

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True)
class OfflineDataset:
    episodes: tuple[Episode, ...]
    obs_dim: int
    action_dim: int
    gamma: float
    env: str = "unknown"

    def __post_init__(self):
        if not self.episodes:
            raise ValueError("dataset must contain at least one episode")
        if self.obs_dim <= 0 or self.action_dim <= 0:
            raise ValueError("obs_dim and action_dim must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        for ep in self.episodes:
            for tr in ep.transitions:
                if len(tr.state) != self.obs_dim or len(tr.next_state) != self.obs_dim:
                    raise ValueError("state dimension does not match obs_dim")
                if len(tr.action) != self.action_dim:
                    raise ValueError("action dimension does not match action_dim")
                if any(abs(x) > 1.0 for x in tr.action):
                    raise ValueError("action components must lie in [-1, 1]")

    @property
    def num_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def transitions(self) -> Iterable[Transition]:
        for ep in self.episodes:
            yield from ep.transitions

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Flat float64 arrays ordered by (episode, step); built once."""
        trs = list(self.transitions())
        out = {
            "states": np.array([t.state for t in trs], dtype=np.float64),
            "actions": np.array([t.action for t in trs], dtype=np.float64),
            "rewards": np.array([t.reward for t in trs], dtype=np.float64),
            "next_states": np.array([t.next_state for t in trs], dtype=np.float64),
            "dones": np.array([t.done for t in trs], dtype=np.float64),
            "episode_ids": np.array([t.episode_id for t in trs], dtype=np.int64),
            "step_indices": np.array([t.step_index for t in trs], dtype=np.int64),
        }
        for arr in out.values():
            arr.setflags(write=False)
        return out


def dataset_from_arrays(
    episodes: Sequence[dict[str, Any]],
    obs_dim: int,
    action_dim: int,
    gamma: float,
    env: str = "unknown",
    first_episode_id: int = 0,
) -> OfflineDataset:
    """Build a dataset from per-episode dicts of arrays (states, actions, rewards, next_states, dones)."""
    eps = []
    for k, ep in enumerate(episodes):
        eid = first_episode_id + k
        n = len(ep["rewards"])
        trs = tuple(
            Transition(
                state=tuple(float(x) for x in ep["states"][t]),
                action=tuple(float(x) for x in ep["actions"][t]),
                reward=float(ep["rewards"][t]),
                next_state=tuple(float(x) for x in ep["next_states"][t]),
                done=bool(ep["dones"][t]),
                episode_id=eid,
                step_index=t,
            )
            for t in range(n)
        )
        eps.append(Episode(trs))
    return OfflineDataset(tuple(eps), obs_dim, action_dim, float(gamma), env)


# --- JSONL persistence -------------------------------------------------------------

def _dumps(obj: Any) -> str:
    # float repr is the shortest string that round-trips to the same double
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_lines(dataset: OfflineDataset, extra_header: dict[str, Any] | None = None) -> list[str]:
    header = {
        "version": FORMAT_VERSION,
        "env": dataset.env,
        "obs_dim": dataset.obs_dim,
        "action_dim": dataset.action_dim,
        "gamma": dataset.gamma,
    }
    if extra_header:
        header.update(extra_header)
    lines = [_dumps(header)]
    for tr in dataset.transitions():
        lines.append(_dumps({
            "eps": tr.episode_id,
            "t": tr.step_index,
            "s": list(tr.state),
            "a": list(tr.action),
            "r": tr.reward,
            "s2": list(tr.next_state),
            "done": tr.done,
        }))
    return lines


def save_dataset(dataset: OfflineDataset, path: str | Path, extra_header: dict[str, Any] | None = None) -> None:
    text = "\n".join(dataset_lines(dataset, extra_header)) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _float_list(value: Any, dim: int, what: str, lineno: int) -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) != dim:
        raise DatasetFormatError(f"dimension mismatch in '{what}': expected {dim} values", lineno)
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise DatasetFormatError(f"non-numeric entry in '{what}'", lineno)
        out.append(float(x))
    return tuple(out)


def load_dataset(path: str | Path) -> OfflineDataset:
    """Parse a dataset JSONL file, reconstructing episodes from ``eps`` boundaries."""
    raw = Path(path).read_text(encoding="utf-8").splitlines()
    if not raw or not raw[0].strip():
        raise DatasetFormatError("missing header", 1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed header: {exc.msg}", 1) from None
    if not isinstance(header, dict):
        raise DatasetFormatError("malformed header: expected an object", 1)
    for key in ("version", "obs_dim", "action_dim", "gamma"):
        if key not in header:
            raise DatasetFormatError(f"malformed header: missing '{key}'", 1)
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header['version']!r}", 1)
    obs_dim, action_dim = header["obs_dim"], header["action_dim"]
    if not (isinstance(obs_dim, int) and isinstance(action_dim, int) and obs_dim > 0 and action_dim > 0):
        raise DatasetFormatError("malformed header: obs_dim/action_dim must be positive integers", 1)
    gamma = float(header["gamma"])
    if not 0.0 < gamma <= 1.0:
        raise DatasetFormatError("malformed header: gamma must lie in (0, 1]", 1)

    episodes: list[Episode] = []
    current: list[Transition] = []
    current_eps: int | None = None
    seen_eps: set[int] = set()

    def close(lineno: int) -> None:
        if current:
            try:
                episodes.append(Episode(tuple(current)))
            except ValueError as exc:
                raise DatasetFormatError(str(exc), lineno) from None

    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            raise DatasetFormatError("blank line", lineno)
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed transition: {exc.msg}", lineno) from None
        if not isinstance(row, dict):
            raise DatasetFormatError("malformed transition: expected an object", lineno)
        missing = [k for k in ("eps", "t", "s", "a", "r", "s2", "done") if k not in row]
        if missing:
            raise DatasetFormatError(f"malformed transition: missing {missing}", lineno)
        eps, t = row["eps"], row["t"]
        if not (isinstance(eps, int) and isinstance(t, int)) or eps < 0 or t < 0:
            raise DatasetFormatError("eps and t must be non-negative integers", lineno)
        if eps != current_eps:
            close(lineno)
            if eps in seen_eps:
                raise DatasetFormatError(f"episode {eps} is not contiguous", lineno)
            seen_eps.add(eps)
            current, current_eps = [], eps
        if t != len(current):
            raise DatasetFormatError(f"non-contiguous step index: expected {len(current)}, got {t}", lineno)
        if current and current[-1].done:
            raise DatasetFormatError("transition after done within an episode", lineno)
        action = _float_list(row["a"], action_dim, "a", lineno)
        if any(abs(x) > 1.0 for x in action):
            raise DatasetFormatError("action outside [-1, 1]", lineno)
        r = row["r"]
        if isinstance(r, bool) or not isinstance(r, (int, float)):
            raise DatasetFormatError("reward must be numeric", lineno)
        if not isinstance(row["done"], bool):
            raise DatasetFormatError("done must be a boolean", lineno)
        current.append(Transition(
            state=_float_list(row["s"], obs_dim, "s", lineno),
            action=action,
            reward=float(r),
            next_state=_float_list(row["s2"], obs_dim, "s2", lineno),
            done=row["done"],
            episode_id=eps,
            step_index=t,
        ))
    close(len(raw))
    if not episodes:
        raise DatasetFormatError("dataset contains no transitions", len(raw))
    return OfflineDataset(tuple(episodes), obs_dim, action_dim, gamma, str(header.get("env", "unknown")))


# --- statistics --------------------------------------------------------------------

def discounted_returns(rewards: Sequence[float] | np.ndarray, gamma: float) -> np.ndarray:
    """Backward recursion g_t = r_t + gamma * g_{t+1}."""
    r = np.asarray(rewards, dtype=np.float64)
    g = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        g[t] = acc
    return g


@dataclass(frozen=True)
class DatasetStats:
    r_min: float
    r_max: float
    r_mean: float
    g_min: float
    g_max: float
    count_transitions: int

    @property
    def reward_degenerate(self) -> bool:
        return self.r_max == self.r_min

    @property
    def return_degenerate(self) -> bool:
        return self.g_max == self.g_min

    @property
    def degenerate(self) -> bool:
        return self.reward_degenerate or self.return_degenerate


def compute_stats(dataset: OfflineDataset, gamma: float | None = None) -> DatasetStats:
    gamma = dataset.gamma if gamma is None else gamma
    rewards = dataset.arrays["rewards"]
    g = np.concatenate([discounted_returns(ep.rewards, gamma) for ep in dataset.episodes])
    return DatasetStats(
        r_min=float(rewards.min()),
        r_max=float(rewards.max()),
        r_mean=float(rewards.mean()),
        g_min=float(g.min()),
        g_max=float(g.max()),
        count_transitions=int(rewards.size),
    )


def normalize(x: np.ndarray | float, lo: float, hi: float) -> np.ndarray:
    """Min-max normalization; a flat range maps every entry to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


# --- seeding -----------------------------------------------------------------------

class Stream:
    """Component ids for the counter-based RNG split."""

    INIT = 0
    BATCH = 1
    OOD_NOISE = 2
    NEXT_NOISE = 3
    ACTOR_NOISE = 4
    PAIRING = 5
    BC_BATCH = 6
    EVAL = 7
    DATA = 8
    FD = 9


def rng_for(seed: int, component: int, counter: int = 0) -> np.random.Generator:
    """Independent generator for (seed, component, counter); order of calls is irrelevant."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(component), int(counter)))
    return np.random.Generator(np.random.PCG64(ss))


# --- configuration -----------------------------------------------------------------

QUALITY_MODES = ("lambda-mix", "nstep-sarsa")
ALGOS = ("aclql", "cql", "none")


@dataclass(frozen=True)
class RunConfig:
    gamma: float = 0.99
    lambda_quality: float = 0.5
    alpha_cql_anchor: float = 10.0
    batch_size: int = 256
    critic_lr: float = 3e-4
    actor_lr: float = 1e-5
    weight_lr: float = 3e-4
    bc_lr: float = 1e-3
    temp_lr: float = 3e-4
    polyak_rate: float = 5e-3
    bc_steps: int = 100_000
    train_steps: int = 1_100_000
    eval_every: int = 1000
    eval_episodes: int = 10
    n_ood_samples: int = 10
    bc_sigma: float = 0.3
    seed: int = 0
    quality_mode: str = "lambda-mix"
    nstep: int = 5
    hidden: tuple[int, ...] = (256, 256, 256)
    init_temperature: float = 1.0
    checkpoint: bool = True
    algo: str = "aclql"
    weight_clamp: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("critic_lr", "actor_lr", "weight_lr", "bc_lr", "temp_lr", "polyak_rate",
                     "alpha_cql_anchor", "bc_sigma", "init_temperature"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lambda_quality <= 1.0:
            raise ValueError("lambda_quality must lie in [0, 1]")
        if self.alpha_cql_anchor <= 0 or self.bc_sigma <= 0:
            raise ValueError("alpha_cql_anchor and bc_sigma must be positive")
        if self.batch_size < 2 or self.n_ood_samples < 1 or self.eval_every < 1:
            raise ValueError("batch_size >= 2, n_ood_samples >= 1 and eval_every >= 1 required")
        if self.quality_mode not in QUALITY_MODES:
            raise ValueError(f"quality_mode must be one of {QUALITY_MODES}")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.weight_clamp is not None and not math.isfinite(self.weight_clamp):
            raise ValueError("weight_clamp must be finite")
        if self.nstep < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("nstep and hidden widths must be positive")

    @classmethod
    def desk(cls, **overrides: Any) -> "RunConfig":
        """Settings sized for a single CPU core (see README for the rationale)."""
        base = dict(
            batch_size=64, n_ood_samples=4, hidden=(64, 64), train_steps=20_000,
            bc_steps=5_000, actor_lr=3e-4, critic_lr=1e-3, weight_lr=3e-4, gamma=0.9,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes: Any) -> "RunConfig":
        return replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def is_finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)
