"""Training objectives and their gradients.

Two layers: output-space functions take network outputs and return the loss with
gradients w.r.t. those outputs; the network-level wrappers push the gradients
through :meth:`MLP.backward`. Anything treated as a constant by an
update (targets, frozen weights, log-densities) enters as a plain array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import MLP, ActorSample, actor_backward, actor_sample, add_grads


@dataclass
class BatchSample:
    states: np.ndarray          # (B, obs)
    actions: np.ndarray         # (B, d)
    rewards: np.ndarray         # (B,)
    next_states: np.ndarray     # (B, obs)
    dones: np.ndarray           # (B,)
    m_in: np.ndarray            # (B,)
    ood_actions: np.ndarray     # (B, K, d) sampled from the current policy
    ood_log_prob_pi: np.ndarray  # (B, K)
    in_log_prob_beta: np.ndarray  # (B,)
    ood_log_prob_beta: np.ndarray  # (B, K) cloned behavior density at the sampled actions
    m_ood: np.ndarray           # (B, K)
    d_ord: np.ndarray           # (B,)
    d_cql: np.ndarray           # (B,)

    def __post_init__(self):
        B = self.states.shape[0]
        for name in ("actions", "rewards", "next_states", "dones", "m_in", "ood_actions",
                     "ood_log_prob_pi", "in_log_prob_beta", "ood_log_prob_beta", "m_ood", "d_ord", "d_cql"):
            if getattr(self, name).shape[0] != B:
                raise ValueError(f"{name} does not share the batch size {B}")

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def n_ood(self) -> int:
        return self.ood_actions.shape[1]

    def ood_inputs(self) -> np.ndarray:
        """(B*K, obs+d) state-action rows for the sampled actions."""
        B, K, d = self.ood_actions.shape
        s = np.repeat(self.states, K, axis=0)
        return np.concatenate([s, self.ood_actions.reshape(B * K, d)], axis=1)

    def in_inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)


@dataclass
class LossReport:
    td: float = 0.0
    penalty: float = 0.0
    mono: float = 0.0
    ord: float = 0.0
    cql: float = 0.0
    pos: float = 0.0
    bc: float = 0.0
    actor: float = 0.0
    weight_total: float = 0.0
    w_mu_mean: float = 0.0
    w_beta_mean: float = 0.0


def sa_input(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, actions], axis=-1)


# --- critic ------------------------------------------------------------------------

def td_terms(q: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * mean (q - target)^2 and its gradient w.r.t. q."""
    err = q - target
    return 0.5 * float(np.mean(err ** 2)), err / err.size


def td_target(target_critics: list[MLP], actor: MLP, batch: BatchSample, gamma: float,
              next_noise: np.ndarray) -> np.ndarray:
    """r + gamma (1 - done) min_k Q_target_k(s', a'), a' ~ pi(s')."""
    a_next = actor_sample(actor, batch.next_states, next_noise).actions
    x = sa_input(batch.next_states, a_next)
    q_next = np.minimum.reduce([c.forward(x)[:, 0] for c in target_critics])
    return batch.rewards + gamma * (1.0 - batch.dones) * q_next


def td_loss(critic: MLP, states: np.ndarray, actions: np.ndarray, target: np.ndarray):
    q, acts = critic.forward_cache(sa_input(states, actions))
    value, g = td_terms(q[:, 0], target)
    grads, _ = critic.backward(acts, g[:, None])
    return value, grads


def cql_terms(q_in: np.ndarray, q_ood: np.ndarray, alpha: float):
    """alpha (mean_ood Q - mean_data Q), written per sample as mean(alpha Q)."""
    value = float(np.mean(alpha * q_ood) - np.mean(alpha * q_in))
    return value, -np.full_like(q_in, alpha) / q_in.size, np.full_like(q_ood, alpha) / q_ood.size


def acl_terms(q_in: np.ndarray, q_ood: np.ndarray, w_beta: np.ndarray, w_mu: np.ndarray):
    """mean(w_mu Q(s, a_mu)) - mean(w_beta Q(s, a)) with the weights held fixed."""
    value = float(np.mean(w_mu * q_ood) - np.mean(w_beta * q_in))
    return value, -w_beta / q_in.size, w_mu / q_ood.size


def _penalty(critic: MLP, batch: BatchSample, terms):
    x = np.concatenate([batch.in_inputs(), batch.ood_inputs()], axis=0)
    q, acts = critic.forward_cache(x)
    B = batch.size
    value, g_in, g_ood = terms(q[:B, 0], q[B:, 0])
    grads, _ = critic.backward(acts, np.concatenate([g_in, g_ood])[:, None])
    return value, grads


def cql_penalty(critic: MLP, batch: BatchSample, alpha: float):
    return _penalty(critic, batch, lambda qi, qo: cql_terms(qi, qo, alpha))


def acl_penalty(critic: MLP, batch: BatchSample, w_mu: np.ndarray, w_beta: np.ndarray):
    """``w_mu`` has one entry per sampled action (B, K), ``w_beta`` one per row (B,)."""
    return _penalty(critic, batch, lambda qi, qo: acl_terms(qi, qo, w_beta, w_mu.reshape(-1)))


def critic_objective(critic: MLP, batch: BatchSample, target: np.ndarray, penalty_terms):
    """TD loss plus a penalty, sharing one forward pass; returns (td, penalty, grads)."""
    x = np.concatenate([batch.in_inputs(), batch.ood_inputs()], axis=0)
    q, acts = critic.forward_cache(x)
    B = batch.size
    td, g_td = td_terms(q[:B, 0], target)
    if penalty_terms is None:
        pen, g_in, g_ood = 0.0, np.zeros(B), np.zeros(q.shape[0] - B)
    else:
        pen, g_in, g_ood = penalty_terms(q[:B, 0], q[B:, 0])
    g = np.concatenate([g_td + g_in, g_ood])
    grads, _ = critic.backward(acts, g[:, None])
    return td, pen, grads


# --- weight network ----------------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _softmax_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return s * (g - np.dot(s, g))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random single n-cycle: each index is paired with its successor along a
    random ordering, so no index maps to itself."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    order = rng.permutation(n)
    p = np.empty(n, dtype=np.int64)
    p[order] = np.roll(order, -1)
    return p


def monotonicity_loss(w_mu: np.ndarray, m_ood: np.ndarray, w_beta: np.ndarray, m_in: np.ndarray,
                       pair_mu: np.ndarray, pair_beta: np.ndarray):
    """Softmax-matched pairwise differences; returns (value, d/dw_mu, d/dw_beta).

    Pushed-down actions: better quality should mean a lower w_mu, so the w_mu
    difference is matched to the negated quality difference. In-dataset actions:
    w_beta differences match quality differences directly.
    """
    w_mu, m_ood = np.ravel(w_mu), np.ravel(m_ood)
    w_beta, m_in = np.ravel(w_beta), np.ravel(m_in)
    if w_mu.size < 2 or w_beta.size < 2:
        raise ValueError("monotonicity loss needs a batch of at least 2")
    sw, sm = softmax(w_mu), softmax(m_ood)
    sb, sn = softmax(w_beta), softmax(m_in)
    j, l = pair_mu, pair_beta
    e_mu = (sw - sw[j]) - (sm[j] - sm)
    e_beta = (sb - sb[l]) - (sn - sn[l])
    value = float(np.mean(e_mu ** 2) + np.mean(e_beta ** 2))
    ge = 2.0 * e_mu / e_mu.size
    g_sw = ge.copy()
    np.subtract.at(g_sw, j, ge)
    gb = 2.0 * e_beta / e_beta.size
    g_sb = gb.copy()
    np.subtract.at(g_sb, l, gb)
    return value, _softmax_backward(sw, g_sw), _softmax_backward(sb, g_sb)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class HingeTerms:
    l_ord: float
    l_cql: float
    g_ord_mu: np.ndarray    # gradients of each hinge w.r.t. w_mu and w_beta
    g_ord_beta: np.ndarray
    g_cql_mu: np.ndarray
    g_cql_beta: np.ndarray

    @property
    def g_w_mu(self) -> np.ndarray:
        return self.g_ord_mu + self.g_cql_mu

    @property
    def g_w_beta(self) -> np.ndarray:
        return self.g_ord_beta + self.g_cql_beta


def log_surrogate(log_p):
    """ln p + 1, which never exceeds p and is cheap to differentiate far into the tails."""
    return np.asarray(log_p, dtype=np.float64) + 1.0


def surrogate_hinges(w_mu, w_beta, ln_mu, ln_beta, d_ord, d_cql, alpha: float) -> HingeTerms:
    """The two conservatism hinges with every density p replaced by ``log_surrogate``.

    Inputs broadcast against each other; both losses are means over the broadcast shape.
    """
    ln_mu = np.asarray(ln_mu, dtype=np.float64)
    ln_beta = np.asarray(ln_beta, dtype=np.float64)
    if not (np.all(np.isfinite(ln_mu)) and np.all(np.isfinite(ln_beta))):
        raise FloatingPointError("non-finite log-density in surrogate hinge")
    w_mu_a = np.asarray(w_mu, dtype=np.float64)
    w_beta_a = np.asarray(w_beta, dtype=np.float64)
    lm, lb = log_surrogate(ln_mu), log_surrogate(ln_beta)
    z_ord = w_beta_a * lb - w_mu_a * lm + d_ord * lb
    z_cql = (w_mu_a - alpha) * lm - (w_beta_a - alpha) * lb + d_cql * lb
    z_ord, z_cql, lm_b, lb_b = np.broadcast_arrays(z_ord, z_cql, lm, lb)
    n = z_ord.size
    on_ord = (z_ord > 0) / n
    on_cql = (z_cql > 0) / n
    return HingeTerms(
        l_ord=float(np.mean(np.maximum(z_ord, 0.0))),
        l_cql=float(np.mean(np.maximum(z_cql, 0.0))),
        g_ord_mu=_unbroadcast(-on_ord * lm_b, w_mu_a.shape),
        g_ord_beta=_unbroadcast(on_ord * lb_b, w_beta_a.shape),
        g_cql_mu=_unbroadcast(on_cql * lm_b, w_mu_a.shape),
        g_cql_beta=_unbroadcast(-on_cql * lb_b, w_beta_a.shape),
    )


def positivity_loss(w_mu, w_beta):
    w_mu = np.asarray(w_mu, dtype=np.float64)
    w_beta = np.asarray(w_beta, dtype=np.float64)
    value = float(np.mean(np.maximum(-w_mu, 0.0)) + np.mean(np.maximum(-w_beta, 0.0)))
    return value, -(w_mu < 0).astype(np.float64) / w_mu.size, -(w_beta < 0).astype(np.float64) / w_beta.size


def weight_outputs(weight_net: MLP, batch: BatchSample):
    """Both heads at every sampled action (B, K, 2) and at every dataset action (B, 2)."""
    x = np.concatenate([batch.in_inputs(), batch.ood_inputs()], axis=0)
    out, acts = weight_net.forward_cache(x)
    B, K = batch.size, batch.n_ood
    return out[B:].reshape(B, K, 2), out[:B], out, acts


@dataclass
class WeightLoss:
    total: float
    mono: float
    ord: float
    cql: float
    pos: float
    grads: dict
    w_mu: np.ndarray
    w_beta: np.ndarray


def weight_total_loss(weight_net: MLP, batch: BatchSample, alpha: float,
                      pair_mu: np.ndarray, pair_beta: np.ndarray) -> WeightLoss:
    """L_ord + L_cql + L_mono + L_pos with unit coefficients, gradients w.r.t. the weight net.

    The hinges compare both weights and both densities at the same sampled action. The
    monotonicity and positivity terms act on the weights the critic uses: w_mu at
    sampled actions, w_beta at dataset actions.
    """
    w_ood, w_in, out, acts = weight_outputs(weight_net, batch)
    B, K = batch.size, batch.n_ood
    w_mu, w_beta = w_ood[:, :, 0], w_in[:, 1]
    hinge = surrogate_hinges(w_mu, w_ood[:, :, 1], batch.ood_log_prob_pi, batch.ood_log_prob_beta,
                             batch.d_ord[:, None], batch.d_cql[:, None], alpha)
    mono, gm_mu, gm_beta = monotonicity_loss(w_mu, batch.m_ood, w_beta, batch.m_in, pair_mu, pair_beta)
    pos, gp_mu, gp_beta = positivity_loss(w_mu, w_beta)
    g_out = np.zeros_like(out)
    g_out[B:, 0] = hinge.g_w_mu.reshape(-1) + gm_mu + gp_mu.reshape(-1)
    g_out[B:, 1] = hinge.g_w_beta.reshape(-1)
    g_out[:B, 1] = gm_beta + gp_beta
    grads, _ = weight_net.backward(acts, g_out)
    total = hinge.l_ord + hinge.l_cql + mono + pos
    return WeightLoss(total, mono, hinge.l_ord, hinge.l_cql, pos, grads, w_mu, w_beta)


# --- behavior cloning and actor ----------------------------------------------------

def bc_loss(behavior: MLP, states: np.ndarray, actions: np.ndarray):
    """Mean over the batch of the squared action error (summed over action dims)."""
    pred, acts = behavior.forward_cache(states)
    err = pred - actions
    value = float(np.mean(np.sum(err ** 2, axis=1)))
    grads, _ = behavior.backward(acts, 2.0 * err / err.shape[0])
    return value, grads


@dataclass
class ActorLoss:
    value: float
    grads: dict
    log_prob: np.ndarray
    sample: ActorSample


def actor_loss(actor: MLP, critics: list[MLP], states: np.ndarray, noise: np.ndarray,
               temperature: float) -> ActorLoss:
    """mean(temperature * log pi(a|s) - min_k Q_k(s, a)), a reparameterized; critics frozen."""
    sample = actor_sample(actor, states, noise)
    x = sa_input(states, sample.actions)
    qs, caches = [], []
    for c in critics:
        q, acts = c.forward_cache(x)
        qs.append(q[:, 0])
        caches.append(acts)
    q_stack = np.stack(qs)
    pick = np.argmin(q_stack, axis=0)
    q_min = q_stack[pick, np.arange(len(pick))]
    B = states.shape[0]
    value = float(np.mean(temperature * sample.log_prob - q_min))
    g_actions = np.zeros_like(sample.actions)
    d = sample.actions.shape[1]
    for k, c in enumerate(critics):
        sel = (pick == k)
        if not sel.any():
            continue
        g_q = np.where(sel, -1.0 / B, 0.0)[:, None]
        _, g_x = c.backward(caches[k], g_q, need_input=True)
        g_actions += g_x[:, -d:]
    grads = actor_backward(actor, sample, g_actions, np.full(B, temperature / B))
    return ActorLoss(value, grads, sample.log_prob, sample)


def merge(*grads: dict) -> dict:
    out = grads[0]
    for g in grads[1:]:
        out = add_grads(out, g)
    return out
