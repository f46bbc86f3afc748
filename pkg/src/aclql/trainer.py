"""Offline actor-critic training with adaptive conservative weights.

Per step: sample a batch and policy actions, score the sampled actions, update the
twin critics (weights frozen), the weight net, then the actor and its entropy
temperature, and finally the target critics. ``algo="cql"`` swaps the adaptive
penalty for a fixed coefficient; ``algo="none"`` trains without any penalty.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .approximator import (
    MLP,
    ApproximatorSpec,
    ParameterBlock,
    actor_mean_action,
    actor_sample,
    adam_step,
    behavior_log_prob,
    checkpoint_dict,
    load_checkpoint,
    polyak_update,
    restore,
)
from .core import FORMAT_VERSION, OfflineDataset, RunConfig, Stream, compute_stats, rng_for
from .envs import evaluate_policy
from .losses import (
    BatchSample,
    LossReport,
    acl_terms,
    actor_loss,
    bc_loss,
    critic_objective,
    cql_terms,
    derangement,
    sa_input,
    td_target,
    weight_total_loss,
)
from .quality import annotate_dataset, gaps, ood_quality, quality_array

METRIC_FIELDS = ("step", "td", "penalty", "mono", "ord", "cql", "pos", "actor",
                 "w_mu_mean", "w_beta_mean", "avg_q_dataset", "eval_mean", "eval_std")
LOSS_FIELDS = ("td", "penalty", "mono", "ord", "cql", "pos", "actor", "w_mu_mean", "w_beta_mean")


class TrainingDiverged(FloatingPointError):
    pass


# --- state -------------------------------------------------------------------------

@dataclass
class TrainerState:
    actor: MLP
    critics: list[MLP]
    targets: list[MLP]
    weight_net: MLP
    behavior: MLP
    log_temp: ParameterBlock
    step: int = 0

    @property
    def temperature(self) -> float:
        return float(math.exp(self.log_temp.values[0]))

    def nets(self) -> dict:
        return {
            "actor": self.actor, "critic0": self.critics[0], "critic1": self.critics[1],
            "target0": self.targets[0], "target1": self.targets[1],
            "weight": self.weight_net, "behavior": self.behavior, "temperature": {"log_temp": self.log_temp},
        }

    def copy(self) -> "TrainerState":
        return TrainerState(self.actor.copy(), [c.copy() for c in self.critics], [t.copy() for t in self.targets],
                            self.weight_net.copy(), self.behavior.copy(), self.log_temp.copy(), self.step)


def behavior_spec(config: RunConfig, obs_dim: int, action_dim: int) -> ApproximatorSpec:
    return ApproximatorSpec(obs_dim, action_dim, config.hidden, "gaussian-fixed-sigma", config.bc_sigma)


def init_behavior(config: RunConfig, obs_dim: int, action_dim: int) -> MLP:
    return MLP.init(behavior_spec(config, obs_dim, action_dim), rng_for(config.seed, Stream.INIT, 5))


def init_state(config: RunConfig, obs_dim: int, action_dim: int, behavior: MLP | None = None) -> TrainerState:
    """Each network draws from its own init stream, so adding one never shifts another."""
    h = config.hidden
    sa = obs_dim + action_dim
    actor = MLP.init(ApproximatorSpec(obs_dim, action_dim, h, "tanh-gaussian"), rng_for(config.seed, Stream.INIT, 0),
                     final_scale=1e-2)
    critics = [MLP.init(ApproximatorSpec(sa, 1, h), rng_for(config.seed, Stream.INIT, 1 + k)) for k in range(2)]
    # weights start near the anchor so training begins from the fixed-coefficient penalty
    weight_net = MLP.init(ApproximatorSpec(sa, 2, h, "two-headed-weights"), rng_for(config.seed, Stream.INIT, 3),
                          final_scale=0.1, final_bias=config.alpha_cql_anchor)
    if behavior is None:
        behavior = init_behavior(config, obs_dim, action_dim)
    log_temp = ParameterBlock("log_temp", np.array([math.log(config.init_temperature)]))
    return TrainerState(actor, critics, [c.copy() for c in critics], weight_net, behavior, log_temp)


# --- behavior cloning --------------------------------------------------------------

@dataclass
class BCResult:
    behavior: MLP
    final_mse: float


def pretrain_bc(dataset: OfflineDataset, config: RunConfig, behavior: MLP | None = None) -> BCResult:
    arr = dataset.arrays
    states, actions = arr["states"], arr["actions"]
    net = init_behavior(config, dataset.obs_dim, dataset.action_dim) if behavior is None else behavior.copy()
    n = len(states)
    for i in range(config.bc_steps):
        idx = rng_for(config.seed, Stream.BC_BATCH, i).integers(0, n, size=config.batch_size)
        value, grads = bc_loss(net, states[idx], actions[idx])
        if not math.isfinite(value):
            raise TrainingDiverged(f"behavior cloning step {i}: non-finite loss {value}")
        adam_step(net.blocks, grads, config.bc_lr)
    err = net.forward(states) - actions
    return BCResult(net, float(np.mean(np.sum(err ** 2, axis=1))))


# --- per-run data ------------------------------------------------------------------

@dataclass
class PreparedData:
    """Dataset arrays plus everything per-transition that stays fixed during training."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    m: np.ndarray
    log_prob_beta: np.ndarray
    d_ord: np.ndarray
    d_cql: np.ndarray
    r_max: float

    @property
    def size(self) -> int:
        return len(self.rewards)


def prepare(dataset: OfflineDataset, config: RunConfig, behavior: MLP,
            m: np.ndarray | None = None) -> PreparedData:
    arr = dataset.arrays
    stats = compute_stats(dataset, config.gamma)
    if m is None:
        ann = annotate_dataset(dataset, stats, config.lambda_quality, config.quality_mode, config.nstep, config.gamma)
        m = quality_array(ann)
    # bound on |r|: the largest reward alone goes negative when no transition pays off
    r_bound = max(abs(stats.r_min), abs(stats.r_max))
    d_ord, d_cql = gaps(np.asarray(m), r_bound)
    return PreparedData(
        arr["states"], arr["actions"], arr["rewards"], arr["next_states"], arr["dones"].astype(np.float64),
        np.asarray(m, dtype=np.float64), behavior_log_prob(behavior, arr["states"], arr["actions"], config.bc_sigma),
        d_ord, d_cql, r_bound,
    )


def sample_batch(data: PreparedData, state: TrainerState, config: RunConfig, step: int) -> BatchSample:
    idx = rng_for(config.seed, Stream.BATCH, step).integers(0, data.size, size=config.batch_size)
    d, K = data.actions.shape[1], config.n_ood_samples
    noise = rng_for(config.seed, Stream.OOD_NOISE, step).standard_normal((config.batch_size, K, d))
    states, actions = data.states[idx], data.actions[idx]
    ood = actor_sample(state.actor, states, noise)
    return BatchSample(
        states=states, actions=actions, rewards=data.rewards[idx], next_states=data.next_states[idx],
        dones=data.dones[idx], m_in=data.m[idx], ood_actions=ood.actions, ood_log_prob_pi=ood.log_prob,
        in_log_prob_beta=data.log_prob_beta[idx],
        ood_log_prob_beta=behavior_log_prob(state.behavior, np.repeat(states, K, axis=0),
                                            ood.actions.reshape(-1, d), config.bc_sigma).reshape(-1, K),
        m_ood=ood_quality(data.m[idx][:, None], ood.actions, actions[:, None, :]),
        d_ord=data.d_ord[idx], d_cql=data.d_cql[idx],
    )


# --- one update --------------------------------------------------------------------

def _check(value: float, step: int, component: str) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"step {step}: non-finite {component} loss ({value})")
    return value


def train_step(state: TrainerState, data: PreparedData, config: RunConfig) -> LossReport:
    """One update of every trained network, in place; returns the losses seen."""
    step = state.step
    alpha = config.alpha_cql_anchor
    batch = sample_batch(data, state, config, step)
    B, K, d = batch.ood_actions.shape
    report = LossReport()

    wl = None
    if config.algo == "cql":
        penalty_terms = lambda qi, qo: cql_terms(qi, qo, alpha)  # noqa: E731
        report.w_mu_mean = report.w_beta_mean = alpha
    elif config.algo == "none":
        penalty_terms = None
    elif config.weight_clamp is not None:
        w_mu = np.full(B * K, config.weight_clamp)
        w_beta = np.full(B, config.weight_clamp)
        penalty_terms = lambda qi, qo: acl_terms(qi, qo, w_beta, w_mu)  # noqa: E731
        report.w_mu_mean = report.w_beta_mean = config.weight_clamp
    else:
        # the weight objective does not involve Q, so it is evaluated once here; its
        # outputs are the frozen weights of the critic update
        pair_rng = rng_for(config.seed, Stream.PAIRING, step)
        wl = weight_total_loss(state.weight_net, batch, alpha, derangement(B * K, pair_rng), derangement(B, pair_rng))
        w_mu, w_beta = wl.w_mu.reshape(-1), wl.w_beta
        penalty_terms = lambda qi, qo: acl_terms(qi, qo, w_beta, w_mu)  # noqa: E731
        report.w_mu_mean, report.w_beta_mean = float(np.mean(w_mu)), float(np.mean(w_beta))

    next_noise = rng_for(config.seed, Stream.NEXT_NOISE, step).standard_normal((B, d))
    target = td_target(state.targets, state.actor, batch, config.gamma, next_noise)
    td_sum = pen_sum = 0.0
    for critic in state.critics:
        td, pen, grads = critic_objective(critic, batch, target, penalty_terms)
        _check(td + pen, step, "critic")
        td_sum += td
        pen_sum += pen
        adam_step(critic.blocks, grads, config.critic_lr)
    report.td, report.penalty = td_sum / 2, pen_sum / 2

    if wl is not None:
        _check(wl.total, step, "weight")
        adam_step(state.weight_net.blocks, wl.grads, config.weight_lr)
        report.mono, report.ord, report.cql, report.pos, report.weight_total = wl.mono, wl.ord, wl.cql, wl.pos, wl.total

    actor_noise = rng_for(config.seed, Stream.ACTOR_NOISE, step).standard_normal((B, d))
    al = actor_loss(state.actor, state.critics, batch.states, actor_noise, state.temperature)
    report.actor = _check(al.value, step, "actor")
    adam_step(state.actor.blocks, al.grads, config.actor_lr)
    # temperature loss: -log_temp * (log pi + target entropy), target entropy = -action_dim
    g_temp = -(float(np.mean(al.log_prob)) - d)
    adam_step({"log_temp": state.log_temp}, {"log_temp": np.array([g_temp])}, config.temp_lr)

    for tgt, critic in zip(state.targets, state.critics):
        polyak_update(tgt.blocks, critic.blocks, config.polyak_rate)
    state.step += 1
    return report


def fit_weights(weight_net: MLP, batch: BatchSample, alpha: float, steps: int, lr: float, seed: int) -> list[float]:
    """Adam on the weight objective alone, for a fixed batch; returns the loss per step."""
    B, K = batch.size, batch.n_ood
    history = []
    for i in range(steps):
        pair_rng = rng_for(seed, Stream.PAIRING, i)
        wl = weight_total_loss(weight_net, batch, alpha, derangement(B * K, pair_rng), derangement(B, pair_rng))
        history.append(_check(wl.total, i, "weight"))
        adam_step(weight_net.blocks, wl.grads, lr)
    return history


# --- evaluation and model selection ------------------------------------------------

def average_q(actor: MLP, critics: Sequence[MLP], states: np.ndarray, chunk: int | None = None) -> float:
    """Mean over states of min-twin Q(s, policy mean action); ``chunk`` streams the pass."""
    if chunk is None:
        a = actor_mean_action(actor, states)
        x = sa_input(states, a)
        return float(np.mean(np.minimum.reduce([c.forward(x)[:, 0] for c in critics])))
    total = 0.0
    for lo in range(0, len(states), chunk):
        s = states[lo:lo + chunk]
        x = sa_input(s, actor_mean_action(actor, s))
        total += float(np.sum(np.minimum.reduce([c.forward(x)[:, 0] for c in critics])))
    return total / len(states)


def policy_of(actor: MLP) -> Callable:
    return lambda obs, rng: actor_mean_action(actor, obs[None, :])[0]


def evaluate_actor(actor: MLP, env: str, episodes: int, seed: int) -> tuple[float, float]:
    return evaluate_policy(policy_of(actor), env, episodes, seed)


@dataclass
class CheckpointRecord:
    step: int
    actor: MLP
    critics: list[MLP]


def select_model(checkpoints: Sequence[CheckpointRecord], states: np.ndarray) -> int:
    """Step of the checkpoint with the highest average Q; ties go to the latest step."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best_step, best_q = None, -math.inf
    for ck in sorted(checkpoints, key=lambda c: c.step):
        q = average_q(ck.actor, ck.critics, states)
        if q >= best_q:
            best_step, best_q = ck.step, q
    return best_step


def record_from_checkpoint(path: str | Path, template: TrainerState) -> CheckpointRecord:
    ck = load_checkpoint(path)
    arrays = ck["arrays"]
    return CheckpointRecord(ck["step"], restore(template.actor, arrays, "actor"),
                            [restore(template.critics[k], arrays, f"critic{k}") for k in range(2)])


# --- full run ----------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainerState
    rows: list[dict] = field(default_factory=list)
    selected_step: int = 0
    bc_mse: float | None = None


def _row(state: TrainerState, data: PreparedData, config: RunConfig, env: str, losses: dict) -> dict:
    mean, std = evaluate_actor(state.actor, env, config.eval_episodes, config.seed)
    row = {"step": state.step, **losses,
           "avg_q_dataset": average_q(state.actor, state.critics, data.states),
           "eval_mean": mean, "eval_std": std}
    for k, v in row.items():
        if k != "step" and not math.isfinite(v):
            raise TrainingDiverged(f"step {state.step}: non-finite {k}")
    return row


def train(dataset: OfflineDataset, config: RunConfig, run_dir: str | Path | None = None,
          behavior: MLP | None = None, m: np.ndarray | None = None,
          progress: Callable[[dict], None] | None = None) -> RunResult:
    """Behavior cloning (unless ``behavior`` is given) followed by ``train_steps`` updates.

    A metrics row is written every ``eval_every`` steps, at step 0, and after the final
    step. With ``run_dir`` set, the directory receives config.json, metrics.csv,
    checkpoints (if enabled) and selected.json.
    """
    bc_mse = None
    if behavior is None:
        bc = pretrain_bc(dataset, config)
        behavior, bc_mse = bc.behavior, bc.final_mse
    state = init_state(config, dataset.obs_dim, dataset.action_dim, behavior)
    data = prepare(dataset, config, state.behavior, m)
    env = dataset.env
    chash = config.config_hash()
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        write_json(out / "config.json", {"version": FORMAT_VERSION, "config_hash": chash, "config": config.to_dict()})

    result = RunResult(state, bc_mse=bc_mse)
    acc = {k: 0.0 for k in LOSS_FIELDS}
    n_acc = 0
    best_q = -math.inf

    def emit():
        nonlocal acc, n_acc, best_q
        losses = {k: (acc[k] / n_acc if n_acc else 0.0) for k in LOSS_FIELDS}
        if n_acc == 0 and config.algo == "cql":
            losses["w_mu_mean"] = losses["w_beta_mean"] = config.alpha_cql_anchor
        elif n_acc == 0 and config.algo == "aclql" and config.weight_clamp is not None:
            losses["w_mu_mean"] = losses["w_beta_mean"] = config.weight_clamp
        row = _row(state, data, config, env, losses)
        result.rows.append(row)
        if row["avg_q_dataset"] >= best_q:
            best_q, result.selected_step = row["avg_q_dataset"], state.step
        if out is not None and config.checkpoint:
            write_json(out / "checkpoints" / f"step_{state.step:08d}.json", checkpoint_dict(state.nets(), chash, state.step))
        if progress is not None:
            progress(row)
        acc = {k: 0.0 for k in LOSS_FIELDS}
        n_acc = 0

    emit()
    for _ in range(config.train_steps):
        rep = asdict(train_step(state, data, config))
        for k in LOSS_FIELDS:
            acc[k] += rep[k]
        n_acc += 1
        if state.step % config.eval_every == 0 or state.step == config.train_steps:
            emit()

    if out is not None:
        write_metrics(out / "metrics.csv", result.rows, chash)
        write_json(out / "selected.json", {"version": FORMAT_VERSION, "config_hash": chash,
                                           "step": result.selected_step, "avg_q_dataset": best_q})
    return result


# --- files -------------------------------------------------------------------------

def write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n")


def write_metrics(path: str | Path, rows: Sequence[dict], config_hash: str) -> None:
    """CSV under a leading ``#`` provenance line; floats written with repr so they round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# version={FORMAT_VERSION} config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: (int(v) if k == "step" else float(v)) for k, v in rec.items()} for rec in csv.DictReader(lines)]


def metrics_table(path: str | Path) -> bytes:
    """The CSV body without its provenance line, for byte comparisons across configs."""
    return b"".join(ln for ln in Path(path).read_bytes().splitlines(keepends=True) if not ln.startswith(b"#"))
