"""Exact finite-MDP fixed points for ordinary, CQL and ACL-QL backups.

Q-tables are ``(n_states, n_actions)`` arrays. Every fixed point is computed twice:
by a resolvent solve of ``(I - gamma P^pi) Q = r - shift`` over the flattened
state-action index, and by iterating the shifted backup from zero. The iterate is
the independent oracle for the solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12
ZERO_TOL = 1e-9


@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray  # [s, a, s']
    r: np.ndarray  # [s, a]
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise ValueError("P must be [S, A, S] and r must be [S, A]")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("every P[s, a] must be a probability vector")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def _check_policy(p: np.ndarray, shape: tuple[int, int], name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != shape:
        raise ValueError(f"{name} must have shape {shape}")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > PROB_TOL:
        raise ValueError(f"{name} rows must be probability vectors")
    return p


@dataclass(frozen=True)
class TabularPolicyPair:
    """Evaluation policy pi, behavior policy pi_beta and push-down distribution mu."""

    pi: np.ndarray
    pi_beta: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.pi)
        for name in ("pi", "pi_beta", "mu"):
            object.__setattr__(self, name, _check_policy(getattr(self, name), shape, name))

    @property
    def support_ok(self) -> bool:
        return bool(np.all((self.mu <= 0) | (self.pi_beta > 0)))


@dataclass(frozen=True)
class WeightAssignment:
    w_mu: np.ndarray
    w_beta: np.ndarray

    def __post_init__(self):
        for name in ("w_mu", "w_beta"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, w)

    @classmethod
    def constant(cls, value: float, shape: tuple[int, int]) -> "WeightAssignment":
        return cls(np.full(shape, float(value)), np.full(shape, float(value)))


# --- linear algebra ----------------------------------------------------------------

def gauss_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by Gaussian elimination with partial pivoting."""
    M = np.array(A, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = M.shape[0]
    if M.shape != (n, n) or x.shape[0] != n:
        raise ValueError("A must be square and match b")
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if M[p, k] == 0.0:
            raise np.linalg.LinAlgError("singular system")
        if p != k:
            M[[k, p]] = M[[p, k]]
            x[[k, p]] = x[[p, k]]
        f = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= np.outer(f, M[k, k:])
        x[k + 1:] -= f * x[k] if x.ndim == 1 else np.outer(f, x[k])
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - M[k, k + 1:] @ x[k + 1:]) / M[k, k]
    return x


def policy_transition(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """P^pi over flattened (s, a): P^pi[(s,a), (s',a')] = P[s,a,s'] pi[s',a']."""
    S, A = mdp.n_states, mdp.n_actions
    return np.einsum("sat,tb->satb", mdp.P, pi).reshape(S * A, S * A)


def resolvent_apply(mdp: TabularMDP, pi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(I - gamma P^pi)^{-1} x for a table x."""
    n = mdp.n_states * mdp.n_actions
    A = np.eye(n) - mdp.gamma * policy_transition(mdp, pi)
    return gauss_solve(A, np.asarray(x, dtype=np.float64).reshape(n)).reshape(mdp.r.shape)


def bellman_backup(mdp: TabularMDP, pi: np.ndarray, Q: np.ndarray) -> np.ndarray:
    v_next = np.sum(pi * Q, axis=1)
    return mdp.r + mdp.gamma * mdp.P @ v_next


def iterate_backup(mdp: TabularMDP, pi: np.ndarray, shift: np.ndarray | float = 0.0,
                   tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of Q <- B^pi Q - shift by repeated application from Q = 0.

    Steps shrink geometrically for a contraction, so iteration runs on past the
    tolerance until they stop shrinking (the rounding floor).
    """
    Q = np.zeros_like(mdp.r)
    prev = np.inf
    for _ in range(max_iter):
        Q_new = bellman_backup(mdp, pi, Q) - shift
        delta = float(np.max(np.abs(Q_new - Q)))
        if delta <= tol * max(1.0, float(np.max(np.abs(Q_new)))) and (delta == 0.0 or delta >= prev):
            return Q_new
        Q, prev = Q_new, delta
    raise RuntimeError("shifted backup did not converge")


# --- gaps and fixed points ---------------------------------------------------------

def _require_beta(pi_beta: np.ndarray) -> None:
    zeros = np.argwhere(pi_beta <= 0.0)
    if zeros.size:
        s, a = zeros[0]
        raise ZeroDivisionError(f"pi_beta[{s}][{a}] = 0 where the gap is evaluated")


def acl_gap(policies: TabularPolicyPair, weights: WeightAssignment) -> np.ndarray:
    """Per-backup shift (w_mu mu - w_beta pi_beta) / pi_beta."""
    _require_beta(policies.pi_beta)
    return (weights.w_mu * policies.mu - weights.w_beta * policies.pi_beta) / policies.pi_beta


def cql_gap(policies: TabularPolicyPair, alpha: float) -> np.ndarray:
    _require_beta(policies.pi_beta)
    return alpha * (policies.mu - policies.pi_beta) / policies.pi_beta


def dcql_gap(policies: TabularPolicyPair, weights: WeightAssignment, alpha: float) -> np.ndarray:
    """((alpha - w_mu) mu - (alpha - w_beta) pi_beta) / pi_beta."""
    _require_beta(policies.pi_beta)
    mu, pb = policies.mu, policies.pi_beta
    return ((alpha - weights.w_mu) * mu - (alpha - weights.w_beta) * pb) / pb


def ordinary_fixed_point(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    return resolvent_apply(mdp, pi, mdp.r)


def acl_fixed_point(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment) -> np.ndarray:
    return resolvent_apply(mdp, policies.pi, mdp.r - acl_gap(policies, weights))


def cql_fixed_point(mdp: TabularMDP, policies: TabularPolicyPair, alpha: float) -> np.ndarray:
    return resolvent_apply(mdp, policies.pi, mdp.r - cql_gap(policies, alpha))


def acl_backup(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment, Q: np.ndarray) -> np.ndarray:
    return bellman_backup(mdp, policies.pi, Q) - acl_gap(policies, weights)


def cql_backup(mdp: TabularMDP, policies: TabularPolicyPair, alpha: float, Q: np.ndarray) -> np.ndarray:
    return bellman_backup(mdp, policies.pi, Q) - cql_gap(policies, alpha)


# --- operator checks ---------------------------------------------------------------

@dataclass
class Report:
    name: str
    checks: int = 0
    passed: int = 0
    max_residual: float = 0.0
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.checks == self.passed

    def check(self, label: str, residual: float, tol: float, **info) -> bool:
        self.checks += 1
        self.max_residual = max(self.max_residual, float(residual))
        if residual <= tol:
            self.passed += 1
            return True
        self.violations.append({"check": f"{self.name}:{label}", "residual": float(residual), **info})
        return False

    def require(self, label: str, condition: bool, **info) -> bool:
        self.checks += 1
        if condition:
            self.passed += 1
            return True
        self.violations.append({"check": f"{self.name}:{label}", **info})
        return False

    def merge(self, other: "Report") -> None:
        self.checks += other.checks
        self.passed += other.passed
        self.max_residual = max(self.max_residual, other.max_residual)
        self.violations.extend(other.violations)


def _sign(x: np.ndarray, tol: float = ZERO_TOL) -> np.ndarray:
    return np.where(np.abs(x) <= tol, 0, np.sign(x)).astype(int)


def _pairs(mask: np.ndarray) -> list[list[int]]:
    return [list(map(int, p)) for p in np.argwhere(mask)]


def verify_gap_shift(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment,
                 probe: np.ndarray | None = None) -> Report:
    """Per-backup shift equals the gap; fixed-point ordering follows the propagated gap."""
    rep = Report("gap_shift")
    gap = acl_gap(policies, weights)
    if probe is None:
        probe = np.zeros_like(mdp.r)
    diff = bellman_backup(mdp, policies.pi, probe) - acl_backup(mdp, policies, weights, probe)
    rep.check("backup_gap", np.max(np.abs(diff - gap)), 1e-10)

    q_ord = ordinary_fixed_point(mdp, policies.pi)
    q_acl = acl_fixed_point(mdp, policies, weights)
    propagated = resolvent_apply(mdp, policies.pi, gap)
    mismatch = _sign(q_ord - q_acl) != _sign(propagated)
    rep.require("fixed_point_sign", not mismatch.any(), pairs=_pairs(mismatch))
    if np.all(gap > 0):
        bad = q_acl > q_ord + ZERO_TOL
        rep.require("more_conservative", not bad.any(), pairs=_pairs(bad))
    if np.all(gap < 0):
        bad = q_acl < q_ord - ZERO_TOL
        rep.require("less_conservative", not bad.any(), pairs=_pairs(bad))
    return rep


def propagated_shift(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment) -> np.ndarray:
    return -resolvent_apply(mdp, policies.pi, acl_gap(policies, weights))


def verify_tightness(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment,
                       err: np.ndarray | None = None) -> Report:
    """Zero sampling error: Q_acl - Q_ord = h exactly; with a slack table, the sandwich."""
    rep = Report("tightness")
    h = propagated_shift(mdp, policies, weights)
    diff = iterate_backup(mdp, policies.pi, acl_gap(policies, weights)) - iterate_backup(mdp, policies.pi)
    rep.check("tight", np.max(np.abs(diff - h)), 1e-9)
    if err is not None:
        err = np.asarray(err, dtype=np.float64)
        if np.any(err < 0):
            raise ValueError("err must be non-negative")
        lower = diff < h - err - ZERO_TOL
        upper = diff > h + err + ZERO_TOL
        rep.require("lower_bound", not lower.any(), pairs=_pairs(lower))
        rep.require("upper_bound", not upper.any(), pairs=_pairs(upper))
    return rep


def verify_against_cql(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment, alpha: float,
                 probe: np.ndarray | None = None) -> Report:
    rep = Report("against_cql")
    d_cql = dcql_gap(policies, weights, alpha)
    if probe is None:
        probe = np.zeros_like(mdp.r)
    diff = acl_backup(mdp, policies, weights, probe) - cql_backup(mdp, policies, alpha, probe)
    rep.check("backup_dcql", np.max(np.abs(diff - d_cql)), 1e-10)
    q_acl = acl_fixed_point(mdp, policies, weights)
    q_cql = cql_fixed_point(mdp, policies, alpha)
    if np.all(d_cql > 0):
        bad = q_acl < q_cql - ZERO_TOL
        rep.require("less_conservative_than_cql", not bad.any(), pairs=_pairs(bad))
    if np.all(d_cql < 0):
        bad = q_acl > q_cql + ZERO_TOL
        rep.require("more_conservative_than_cql", not bad.any(), pairs=_pairs(bad))
    return rep


def verify_convergence(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment,
                       alpha: float) -> Report:
    """Resolvent solves agree with iterated backups for all three operators."""
    rep = Report("fixed_points")
    pi = policies.pi
    rep.check("ordinary", np.max(np.abs(ordinary_fixed_point(mdp, pi) - iterate_backup(mdp, pi))), 1e-8)
    rep.check("acl", np.max(np.abs(acl_fixed_point(mdp, policies, weights)
                                    - iterate_backup(mdp, pi, acl_gap(policies, weights)))), 1e-8)
    rep.check("cql", np.max(np.abs(cql_fixed_point(mdp, policies, alpha)
                                    - iterate_backup(mdp, pi, cql_gap(policies, alpha)))), 1e-8)
    return rep


def sandwich_premise(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment,
                     alpha: float) -> tuple[bool, bool]:
    """(pointwise premise, propagated premise) for Q_cql <= Q_acl <= Q_ord.

    The pointwise premise (gap > 0 and d_cql > 0 at every pair) can never hold for
    normalized policies: pi_beta-weighted, the two gaps sum to alpha * sum(mu - pi_beta) = 0
    in every state. The propagated premise asks the same of the resolvent images.
    """
    gap = acl_gap(policies, weights)
    d_cql = dcql_gap(policies, weights, alpha)
    pointwise = bool(np.all(gap > 0) and np.all(d_cql > 0))
    propagated = bool(np.all(resolvent_apply(mdp, policies.pi, gap) >= 0)
                      and np.all(resolvent_apply(mdp, policies.pi, d_cql) >= 0))
    return pointwise, propagated


def verify_sandwich(mdp: TabularMDP, policies: TabularPolicyPair, weights: WeightAssignment,
                    alpha: float) -> Report:
    rep = Report("sandwich")
    q_ord = ordinary_fixed_point(mdp, policies.pi)
    q_acl = acl_fixed_point(mdp, policies, weights)
    q_cql = cql_fixed_point(mdp, policies, alpha)
    low = q_cql > q_acl + ZERO_TOL
    high = q_acl > q_ord + ZERO_TOL
    rep.require("cql_le_acl", not low.any(), pairs=_pairs(low))
    rep.require("acl_le_ord", not high.any(), pairs=_pairs(high))
    return rep


# --- random corpus -----------------------------------------------------------------

def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.9) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(P, r, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, floor: float = 0.0) -> np.ndarray:
    p = rng.dirichlet(np.ones(n_actions), size=n_states) + floor
    return p / p.sum(axis=1, keepdims=True)


def random_instance(seed: int, gamma: float = 0.9) -> tuple[TabularMDP, TabularPolicyPair]:
    """|S| in 2..5, |A| in 2..4, Dirichlet(1) rows, rewards U[-1, 1]; pi_beta kept away from 0."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 6))
    A = int(rng.integers(2, 5))
    mdp = random_mdp(rng, S, A, gamma)
    pi_beta = random_policy(rng, S, A, floor=0.05)
    mu = random_policy(rng, S, A)
    pi = mu.copy()
    return mdp, TabularPolicyPair(pi=pi, pi_beta=pi_beta, mu=mu)


def _shift_weights(policies: TabularPolicyPair, target_gap: np.ndarray, w_beta: np.ndarray) -> WeightAssignment:
    """Weights whose ACL gap equals target_gap given w_beta (requires mu > 0)."""
    mu, pb = policies.mu, policies.pi_beta
    w_mu = (target_gap * pb + w_beta * pb) / mu
    return WeightAssignment(w_mu, w_beta)


def run_corpus(trials: int = 100, seed: int = 0, alpha: float = 10.0) -> dict:
    """Run every operator check over a corpus of random instances; JSON-ready report."""
    total = Report("corpus")
    pointwise_premise = 0
    sandwich_instances = 0
    for k in range(trials):
        inst_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        mdp, pol = random_instance(inst_seed)
        rng = np.random.default_rng(inst_seed + 1)
        shape = mdp.r.shape

        general = WeightAssignment(rng.uniform(0.0, 2 * alpha, shape), rng.uniform(0.0, 2 * alpha, shape))
        w_beta = rng.uniform(0.0, alpha, shape)
        positive = _shift_weights(pol, rng.uniform(0.1, 1.0, shape), w_beta)
        negative = _shift_weights(pol, -rng.uniform(0.1, 1.0, shape), w_beta)
        total.merge(verify_convergence(mdp, pol, general, alpha))
        probe = rng.normal(size=shape)
        for w in (general, positive, negative):
            total.merge(verify_gap_shift(mdp, pol, w, probe))
            total.merge(verify_tightness(mdp, pol, w, err=np.abs(propagated_shift(mdp, pol, w)) / 2))
            total.merge(verify_against_cql(mdp, pol, w, alpha, probe))
        for delta in (-1.0, 1.0):
            same = TabularPolicyPair(pi=pol.pi, pi_beta=pol.pi_beta, mu=pol.pi_beta)
            w = WeightAssignment(np.full(shape, alpha + delta), np.full(shape, alpha))
            total.merge(verify_against_cql(mdp, same, w, alpha, probe))

        # sandwich: weights interpolating between zero and CQL along the CQL shift
        for theta in (0.25, 0.5, 0.75):
            w = WeightAssignment(
                theta * alpha + rng.uniform(-0.05, 0.05, shape) * alpha,
                np.full(shape, theta * alpha),
            )
            pw, prop = sandwich_premise(mdp, pol, w, alpha)
            pointwise_premise += pw
            if pw or prop:
                sandwich_instances += 1
                total.merge(verify_sandwich(mdp, pol, w, alpha))
    return {
        "instances": trials,
        "checks": total.checks,
        "checks_passed": total.passed,
        "max_residual": total.max_residual,
        "sandwich_instances": sandwich_instances,
        "pointwise_premise_instances": pointwise_premise,
        "violations": total.violations,
    }
