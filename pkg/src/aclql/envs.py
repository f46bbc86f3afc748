"""Desk-scale environments, scripted data collection and normalized scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from .core import OfflineDataset, Stream, dataset_from_arrays, rng_for
from .tabular import TabularMDP

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]

QUALITIES = ("expert", "medium", "medium-replay", "random")
NOISE = {"expert": 0.05, "medium": 0.4}


class PointMass2D:
    """Point mass on [-2, 2]^2 driven by bounded accelerations toward a fixed goal.

    Observation is (x, y, vx, vy). Each step moves the position by 0.05 * velocity,
    then adds 0.1 * action to the velocity (clamped to [-1, 1]). Reward is the
    negative distance to the goal after the move, plus 10 inside radius 0.1.
    """

    name = "pointmass"
    obs_dim = 4
    action_dim = 2
    horizon = 200
    start = np.array([-1.0, -1.0])
    goal = np.array([1.0, 1.0])
    goal_radius = 0.1
    bonus = 10.0

    def __init__(self):
        self.pos = self.start.copy()
        self.vel = np.zeros(2)
        self.t = 0

    def reset(self) -> np.ndarray:
        self.pos = self.start.copy()
        self.vel = np.zeros(2)
        self.t = 0
        return self.obs()

    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, bool]:
        """Returns (obs, reward, terminal, truncated); the task never terminates."""
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.pos = np.clip(self.pos + 0.05 * self.vel, -2.0, 2.0)
        self.vel = np.clip(self.vel + 0.1 * a, -1.0, 1.0)
        self.t += 1
        dist = float(np.linalg.norm(self.goal - self.pos))
        reward = -dist + (self.bonus if dist < self.goal_radius else 0.0)
        return self.obs(), reward, False, self.t >= self.horizon


def expert_action(obs: np.ndarray, kp: float = 1.0, kd: float = 1.0) -> np.ndarray:
    """Proportional control toward the goal with velocity damping."""
    pos, vel = obs[:2], obs[2:]
    return np.clip(kp * (PointMass2D.goal - pos) - kd * vel, -1.0, 1.0)


def scripted_policy(quality: str) -> Policy:
    if quality == "random":
        return lambda obs, rng: rng.uniform(-1.0, 1.0, size=PointMass2D.action_dim)
    sigma = NOISE[quality]

    def act(obs, rng):
        return np.clip(expert_action(obs) + sigma * rng.normal(size=PointMass2D.action_dim), -1.0, 1.0)

    return act


def noiseless_expert(obs, rng):
    return expert_action(obs)


def rollout(env: PointMass2D, policy: Policy, rng: np.random.Generator) -> dict[str, np.ndarray]:
    obs = env.reset()
    rec = {k: [] for k in ("states", "actions", "rewards", "next_states", "dones")}
    done = False
    while not done:
        a = np.clip(np.asarray(policy(obs, rng), dtype=np.float64), -1.0, 1.0)
        nxt, r, terminal, truncated = env.step(a)
        rec["states"].append(obs)
        rec["actions"].append(a)
        rec["rewards"].append(r)
        rec["next_states"].append(nxt)
        rec["dones"].append(terminal)
        obs = nxt
        done = terminal or truncated
    return {k: np.array(v) for k, v in rec.items()}


def gen_dataset(env: str, quality: str, episodes: int, seed: int, gamma: float = 0.99) -> OfflineDataset:
    """Scripted dataset; medium-replay alternates medium and random episodes."""
    if env != PointMass2D.name:
        raise KeyError(f"unknown env {env!r}")
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}")
    sim = PointMass2D()
    eps = []
    for k in range(episodes):
        q = quality
        if quality == "medium-replay":
            q = "medium" if k % 2 == 0 else "random"
        eps.append(rollout(sim, scripted_policy(q), rng_for(seed, Stream.DATA, k)))
    return dataset_from_arrays(eps, sim.obs_dim, sim.action_dim, gamma, env)


def evaluate_policy(policy: Policy, env: str = "pointmass", episodes: int = 10, seed: int = 0) -> tuple[float, float]:
    if env != PointMass2D.name:
        raise KeyError(f"unknown env {env!r}")
    sim = PointMass2D()
    returns = [float(rollout(sim, policy, rng_for(seed, Stream.EVAL, k))["rewards"].sum()) for k in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


# --- normalized scores -------------------------------------------------------------

@dataclass(frozen=True)
class ScoreAnchors:
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValueError("expert anchor must exceed random anchor")


def normalized_score(mean_return: float, anchors: ScoreAnchors) -> float:
    span = anchors.expert_return - anchors.random_return
    if span == 0:
        raise ZeroDivisionError("expert and random anchors coincide")
    return 100.0 * (mean_return - anchors.random_return) / span


ANCHOR_EPISODES = 1000
ANCHOR_SEED = 20240101
ANCHOR_PROTOCOL = (
    f"mean undiscounted return over {ANCHOR_EPISODES} episodes, evaluation streams of seed {ANCHOR_SEED}; "
    "random = uniform actions in [-1,1]^2, expert = scripted controller with noise 0.05"
)


def compute_anchors(episodes: int = ANCHOR_EPISODES, seed: int = ANCHOR_SEED) -> ScoreAnchors:
    rnd, _ = evaluate_policy(scripted_policy("random"), "pointmass", episodes, seed)
    exp, _ = evaluate_policy(scripted_policy("expert"), "pointmass", episodes, seed)
    return ScoreAnchors(rnd, exp)


def build_registry() -> dict:
    anchors = compute_anchors()
    return {
        PointMass2D.name: {
            "obs_dim": PointMass2D.obs_dim,
            "action_dim": PointMass2D.action_dim,
            "anchors": {"random": anchors.random_return, "expert": anchors.expert_return},
            "anchor_seed_protocol": ANCHOR_PROTOCOL,
        }
    }


def load_registry() -> dict:
    return json.loads(resources.files("aclql").joinpath("registry.json").read_text())


def anchors_for(env: str) -> ScoreAnchors:
    a = load_registry()[env]["anchors"]
    return ScoreAnchors(a["random"], a["expert"])


# --- tabular gridworld -------------------------------------------------------------

class GridWorld:
    """n x n grid, four moves with slip probability; reward 1 on leaving the goal cell,
    which teleports back to the start. Exposes its exact TabularMDP."""

    MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])

    def __init__(self, size: int = 4, slip: float = 0.1):
        self.size = size
        self.slip = slip
        self.n_states = size * size
        self.n_actions = 4
        self.start = 0
        self.goal = self.n_states - 1

    def _move(self, s: int, a: int) -> int:
        r, c = divmod(s, self.size)
        dr, dc = self.MOVES[a]
        r = min(max(r + dr, 0), self.size - 1)
        c = min(max(c + dc, 0), self.size - 1)
        return r * self.size + c

    def tabular_mdp(self, gamma: float = 0.9) -> TabularMDP:
        S, A = self.n_states, self.n_actions
        P = np.zeros((S, A, S))
        r = np.zeros((S, A))
        for s in range(S):
            for a in range(A):
                if s == self.goal:
                    P[s, a, self.start] = 1.0
                    r[s, a] = 1.0
                    continue
                for b in range(A):
                    p = (1.0 - self.slip) if b == a else self.slip / (A - 1)
                    P[s, a, self._move(s, b)] += p
        return TabularMDP(P, r, gamma)

    def sample(self, policy: np.ndarray, n: int, seed: int) -> dict[str, np.ndarray]:
        """Transitions from state-uniform starts under a stochastic policy table."""
        mdp = self.tabular_mdp()
        rng = rng_for(seed, Stream.DATA, 0)
        s = rng.integers(0, self.n_states, size=n)
        u = rng.random(n)[:, None]
        a = (u > np.cumsum(policy[s], axis=1)).sum(axis=1)
        a = np.minimum(a, self.n_actions - 1)
        u2 = rng.random(n)[:, None]
        s2 = np.minimum((u2 > np.cumsum(mdp.P[s, a], axis=1)).sum(axis=1), self.n_states - 1)
        return {"s": s, "a": a, "r": mdp.r[s, a], "s2": s2}


def empirical_mdp(data: dict[str, np.ndarray], n_states: int, n_actions: int, gamma: float):
    """Count-based estimates of P, r and pi_beta; unvisited pairs self-loop with zero reward."""
    counts = np.zeros((n_states, n_actions, n_states))
    np.add.at(counts, (data["s"], data["a"], data["s2"]), 1.0)
    n_sa = counts.sum(axis=2)
    r_sum = np.zeros((n_states, n_actions))
    np.add.at(r_sum, (data["s"], data["a"]), data["r"])
    P = np.where(n_sa[..., None] > 0, counts / np.maximum(n_sa[..., None], 1.0), 0.0)
    for s, a in np.argwhere(n_sa == 0):
        P[s, a, s] = 1.0
    r = np.where(n_sa > 0, r_sum / np.maximum(n_sa, 1.0), 0.0)
    n_s = n_sa.sum(axis=1, keepdims=True)
    pi_beta = np.where(n_s > 0, n_sa / np.maximum(n_s, 1.0), 1.0 / n_actions)
    return TabularMDP(P, r, gamma), pi_beta
