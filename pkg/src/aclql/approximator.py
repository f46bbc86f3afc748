"""Small numpy networks with analytic gradients, Adam, Polyak averaging and a
finite-difference gradient checker.

Networks are rectifier MLPs stored as named :class:`ParameterBlock` objects
(``W0, b0, W1, b1, ...``). ``forward_cache``/``backward`` implement reverse mode for
this one architecture; gradients are returned as ``{block name: array}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .core import FORMAT_VERSION

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TANH_FLOOR = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

HEADS = ("linear", "tanh-gaussian", "gaussian-fixed-sigma", "two-headed-weights")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ParameterBlock:
    name: str
    values: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.values)
        if self.v is None:
            self.v = np.zeros_like(self.values)
        if self.m.shape != self.values.shape or self.v.shape != self.values.shape:
            raise ValueError(f"moment shapes do not match block {self.name}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.name, self.values.copy(), self.m.copy(), self.v.copy(), self.step)


@dataclass(frozen=True)
class ApproximatorSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256, 256)
    head: str = "linear"
    sigma: float | None = None  # gaussian-fixed-sigma only

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "gaussian-fixed-sigma" and not (self.sigma and self.sigma > 0):
            raise ValueError("gaussian-fixed-sigma head needs sigma > 0")
        if self.head == "two-headed-weights" and self.output_dim != 2:
            raise ValueError("weight network output dim must be 2")

    @property
    def layer_sizes(self) -> list[int]:
        raw_out = 2 * self.output_dim if self.head == "tanh-gaussian" else self.output_dim
        return [self.input_dim, *self.hidden, raw_out]


class MLP:
    def __init__(self, spec: ApproximatorSpec, blocks: dict[str, ParameterBlock]):
        self.spec = spec
        self.blocks = blocks
        sizes = spec.layer_sizes
        self.n_layers = len(sizes) - 1
        for i in range(self.n_layers):
            if self.blocks[f"W{i}"].shape != (sizes[i], sizes[i + 1]) or self.blocks[f"b{i}"].shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} parameters do not match the spec")

    @classmethod
    def init(cls, spec: ApproximatorSpec, rng: np.random.Generator, final_scale: float = 1.0,
             final_bias: float | np.ndarray = 0.0) -> "MLP":
        """Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        sizes = spec.layer_sizes
        blocks = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(a)
            W = rng.uniform(-bound, bound, size=(a, b))
            bias = rng.uniform(-bound, bound, size=b)
            if i == len(sizes) - 2:
                W *= final_scale
                bias = bias * final_scale + final_bias
            blocks[f"W{i}"] = ParameterBlock(f"W{i}", W)
            blocks[f"b{i}"] = ParameterBlock(f"b{i}", bias)
        return cls(spec, blocks)

    def copy(self) -> "MLP":
        return MLP(self.spec, {k: b.copy() for k, b in self.blocks.items()})

    def values(self) -> dict[str, np.ndarray]:
        return {k: b.values for k, b in self.blocks.items()}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        for i in range(self.n_layers):
            x = x @ self.blocks[f"W{i}"].values + self.blocks[f"b{i}"].values
            if i < self.n_layers - 1:
                x = np.maximum(x, 0.0)
        return x

    __call__ = forward

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected a batch of shape (n, {self.spec.input_dim})")
        acts = [x]
        for i in range(self.n_layers):
            x = x @ self.blocks[f"W{i}"].values + self.blocks[f"b{i}"].values
            if i < self.n_layers - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return x, acts

    def backward(self, acts: list[np.ndarray], g_out: np.ndarray,
                 need_input: bool = False) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        grads: dict[str, np.ndarray] = {}
        g = g_out
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0 or need_input:
                g = g @ self.blocks[f"W{i}"].values.T
        return grads, (g if need_input else None)


def add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


# --- tanh-Gaussian actor -----------------------------------------------------------

@dataclass
class ActorSample:
    actions: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    acts: list[np.ndarray] = field(repr=False)
    clipped: np.ndarray = field(repr=False)  # log_std outside bounds (zero gradient)
    floored: np.ndarray = field(repr=False)  # 1 - tanh^2 below the floor


def actor_head(actor: MLP, states: np.ndarray):
    raw, acts = actor.forward_cache(states)
    d = actor.spec.output_dim
    mean, raw_log_std = raw[:, :d], raw[:, d:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    clipped = (raw_log_std < LOG_STD_MIN) | (raw_log_std > LOG_STD_MAX)
    return mean, log_std, clipped, acts


def squash_log_prob(noise: np.ndarray, log_std: np.ndarray, actions: np.ndarray):
    """Gaussian log-density of the pre-squash sample minus the tanh Jacobian."""
    one_minus = 1.0 - actions ** 2
    floored = one_minus < TANH_FLOOR
    gauss = -0.5 * noise ** 2 - log_std - HALF_LOG_2PI
    lp = np.sum(gauss - np.log(np.maximum(one_minus, TANH_FLOOR)), axis=-1)
    return lp, floored


def actor_sample(actor: MLP, states: np.ndarray, noise: np.ndarray) -> ActorSample:
    """Reparameterized sample a = tanh(mean + std * noise) with its log-density.

    ``noise`` has shape (n, d) or (n, k, d) for k samples per state.
    """
    mean, log_std, clipped, acts = actor_head(actor, np.atleast_2d(states))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 3:
        m, ls = mean[:, None, :], log_std[:, None, :]
    else:
        m, ls = mean, log_std
    u = m + np.exp(ls) * noise
    a = np.tanh(u)
    lp, floored = squash_log_prob(noise, ls, a)
    return ActorSample(a, lp, mean, log_std, noise, acts, clipped, floored)


def actor_backward(actor: MLP, sample: ActorSample, g_actions: np.ndarray | None,
                   g_log_prob: np.ndarray | None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients w.r.t. actions and log-probs."""
    a, eps = sample.actions, sample.noise
    std = np.exp(sample.log_std if eps.ndim == 2 else sample.log_std[:, None, :])
    g_u = np.zeros_like(a)
    g_ls = np.zeros_like(a)
    if g_actions is not None:
        g_u += g_actions * (1.0 - a ** 2)
    if g_log_prob is not None:
        glp = g_log_prob[..., None]
        # d/du of -log(1 - tanh(u)^2) is 2 tanh(u) unless floored
        g_u += glp * np.where(sample.floored, 0.0, 2.0 * a)
        g_ls += -glp
    g_ls += g_u * std * eps
    g_mean = g_u
    if eps.ndim == 3:
        g_mean, g_ls = g_mean.sum(axis=1), g_ls.sum(axis=1)
    g_ls = np.where(sample.clipped, 0.0, g_ls)
    grads, _ = actor.backward(sample.acts, np.concatenate([g_mean, g_ls], axis=1))
    return grads


def actor_log_prob(actor: MLP, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Density of given actions in (-1, 1)^d under the squashed Gaussian."""
    mean, log_std, _, _ = actor_head(actor, np.atleast_2d(states))
    a = np.asarray(actions, dtype=np.float64)
    u = np.arctanh(a)
    noise = (u - mean) / np.exp(log_std)
    return squash_log_prob(noise, log_std, a)[0]


def actor_mean_action(actor: MLP, states: np.ndarray) -> np.ndarray:
    mean, _, _, _ = actor_head(actor, np.atleast_2d(states))
    return np.tanh(mean)


# --- Gaussian-head behavior policy -------------------------------------------------

def behavior_log_prob(behavior: MLP, states: np.ndarray, actions: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Isotropic Gaussian log-density with mean = network output and fixed std."""
    sigma = behavior.spec.sigma if sigma is None else sigma
    mean = behavior.forward(np.atleast_2d(states))
    z = (np.asarray(actions, dtype=np.float64) - mean) / sigma
    d = mean.shape[-1]
    return -0.5 * np.sum(z ** 2, axis=-1) - d * (math.log(sigma) + HALF_LOG_2PI)


# --- optimisation ------------------------------------------------------------------

def adam_step(blocks: Mapping[str, ParameterBlock], grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Mapping[str, ParameterBlock]:
    """In-place bias-corrected Adam update; every block's counter advances."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block '{name}'")
    for name, g in grads.items():
        blk = blocks[name]
        if g.shape != blk.shape:
            raise ValueError(f"gradient shape {g.shape} does not match block '{name}' {blk.shape}")
        blk.step += 1
        blk.m *= beta1
        blk.m += (1.0 - beta1) * g
        blk.v *= beta2
        blk.v += (1.0 - beta2) * (g * g)
        m_hat = blk.m / (1.0 - beta1 ** blk.step)
        v_hat = blk.v / (1.0 - beta2 ** blk.step)
        blk.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return blocks


def polyak_update(target: Mapping[str, ParameterBlock], online: Mapping[str, ParameterBlock],
                  rate: float = 5e-3) -> Mapping[str, ParameterBlock]:
    for name, blk in target.items():
        src = online[name].values
        if src.shape != blk.shape:
            raise ValueError(f"shape mismatch for block '{name}'")
        # written as a step toward the source so equal inputs stay bit-identical;
        # the clip absorbs rounding that could leave the segment between the two
        new = blk.values + rate * (src - blk.values)
        blk.values = np.clip(new, np.minimum(blk.values, src), np.maximum(blk.values, src))
    return target


# --- finite differences ------------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int


def gradient_check(loss: Callable[[], float], blocks: Mapping[str, ParameterBlock],
                   grads: Mapping[str, np.ndarray], h: float = 1e-5, n_coords: int = 64,
                   rng: np.random.Generator | None = None, kink_tol: float = 1e-3,
                   widen: int = 2) -> GradCheck:
    """Central differences on a random subsample of coordinates.

    ``loss`` is re-evaluated with one coordinate perturbed in place. A coordinate is
    skipped when the one-sided differences disagree by more than ``kink_tol`` (relative)
    plus their rounding error, which happens when a ReLU or hinge kink lies inside
    [x - h, x + h]; a replacement coordinate is drawn in its place.

    Rounding in ``loss`` puts a floor of roughly eps * |loss| / h under any difference
    quotient, which swamps coordinates whose gradient is tiny or exactly zero. When that
    floor exceeds 1e-6 of the gradient scale the step is widened tenfold (at most
    ``widen`` times), repeating the kink test at each width.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    index = [(name, i) for name in grads for i in range(blocks[name].values.size)]
    order = rng.permutation(len(index))
    f0 = loss()
    eps = np.finfo(np.float64).eps
    worst, checked, skipped = 0.0, 0, 0
    for k in order:
        if checked >= n_coords:
            break
        name, i = index[k]
        flat = blocks[name].values.reshape(-1)
        x = flat[i]
        ana = float(grads[name].reshape(-1)[i])
        step, num = h, None
        for _ in range(widen + 1):
            flat[i] = x + step
            fp = loss()
            flat[i] = x - step
            fm = loss()
            flat[i] = x
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            noise = 4.0 * eps * max(abs(f0), abs(fp), abs(fm)) / step
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd)) + 4.0 * noise:
                num = None
                break
            num = (fp - fm) / (2.0 * step)
            if noise <= 1e-6 * max(abs(num), abs(ana), 1e-8):
                break
            step *= 10.0
        if num is None:
            skipped += 1
            continue
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        checked += 1
    return GradCheck(worst, checked, skipped)


def finite_diff_check(loss: Callable[[], float], blocks: Mapping[str, ParameterBlock],
                      grads: Mapping[str, np.ndarray], h: float = 1e-5, n_coords: int = 64,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return gradient_check(loss, blocks, grads, h, n_coords, rng).max_rel_error


def array_blocks(**arrays: np.ndarray) -> dict[str, ParameterBlock]:
    """Wrap plain arrays as blocks so output-level losses can be checked too."""
    return {k: ParameterBlock(k, np.array(v, dtype=np.float64)) for k, v in arrays.items()}


# --- checkpoints -------------------------------------------------------------------

def flat_blocks(nets: Mapping[str, MLP | Mapping[str, ParameterBlock]]) -> dict[str, ParameterBlock]:
    out = {}
    for net_name, net in nets.items():
        blocks = net.blocks if isinstance(net, MLP) else net
        for blk_name, blk in blocks.items():
            out[f"{net_name}.{blk_name}"] = blk
    return out


def checkpoint_dict(nets: Mapping[str, MLP | Mapping[str, ParameterBlock]], config_hash: str, step: int) -> dict:
    return {
        "version": FORMAT_VERSION,
        "nets": {name: {"shape": list(b.shape), "values": b.values.reshape(-1).tolist()}
                 for name, b in flat_blocks(nets).items()},
        "config_hash": config_hash,
        "step": int(step),
    }


def save_checkpoint(path: str | Path, nets: Mapping[str, MLP | Mapping[str, ParameterBlock]],
                    config_hash: str, step: int) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(nets, config_hash, step), separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint version")
    arrays = {name: np.array(d["values"], dtype=np.float64).reshape(d["shape"]) for name, d in data["nets"].items()}
    return {"arrays": arrays, "config_hash": data["config_hash"], "step": data["step"]}


def restore(net: MLP, arrays: Mapping[str, np.ndarray], prefix: str) -> MLP:
    blocks = {k: ParameterBlock(k, arrays[f"{prefix}.{k}"].copy()) for k in net.blocks}
    return MLP(net.spec, blocks)


def iter_blocks(nets: Iterable[MLP]) -> Iterable[ParameterBlock]:
    for net in nets:
        yield from net.blocks.values()
