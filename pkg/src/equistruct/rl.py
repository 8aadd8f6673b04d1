"""Advantage actor-critic over parallel environments.

One trainer covers both the plain A2C loss and the clipped-ratio
surrogate (``clip_eps``). Three input pipelines are supported:

* ``none``: the network sees the raw state.
* ``stochastic``: at update time each transition ``(s, a)`` is replaced by
  ``(L_g s, K_g a)`` for a random group element ``g``.
* ``averaged``: the network is evaluated on the whole orbit of ``s`` and the
  policy is ``mean_g K_g^{-1} pi(L_g s)`` (value: ``mean_g V(L_g s)``), which
  is exactly equivariant whatever the weights.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .envs import GROUP_ORDER, VecEnv, make_env, transform_action, transform_observation
from .nn import PolicyValueNet, build_network, check_network_equivariance, env_representations

__all__ = [
    "TrainConfig",
    "Rollout",
    "AdamState",
    "LossReport",
    "TrainingDivergedError",
    "Head",
    "make_head",
    "collect_rollouts",
    "nstep_returns",
    "a2c_loss",
    "a2c_update",
    "adam_step",
    "evaluate",
    "train",
    "sweep_lr",
    "best_lr",
    "first_crossing",
    "write_curve_csv",
    "CSV_FIELDS",
    "LR_GRIDS",
    "AUGMENT_MODES",
]

AUGMENT_MODES = ("none", "stochastic", "averaged")
VARIANT_CHOICES = ("equivariant", "nullspace", "random", "plain")
CSV_FIELDS = ("variant", "seed", "lr", "env_steps", "return_p25", "return_p50", "return_p75")
# Learning-rate grids searched in the published experiments
LR_GRIDS = {
    "cartpole": (0.01, 0.05, 0.001, 0.005, 0.0001, 0.0003, 0.0005),
    "gridworld": (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3),
}


class TrainingDivergedError(FloatingPointError):
    """Raised when the loss or its gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    env: str = "cartpole"
    variant: str = "equivariant"
    lr: float = 0.01
    n_envs: int = 16
    horizon: int = 5
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    clip_eps: float | None = None
    update_epochs: int = 1
    max_grad_norm: float | None = 0.5
    augment: str = "none"
    total_steps: int = 100_000
    eval_interval: int = 10_000
    eval_episodes: int = 20
    seed: int = 0
    init: str | None = None
    width_divisor: float | None = None
    depth: int = 2

    def __post_init__(self):
        if self.env not in GROUP_ORDER:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.variant not in VARIANT_CHOICES:
            raise ValueError(f"variant must be one of {VARIANT_CHOICES}, got {self.variant!r}")
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.n_envs < 1 or self.horizon < 1 or self.update_epochs < 1:
            raise ValueError("n_envs, horizon and update_epochs must be >= 1")
        if self.clip_eps is not None and self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive when set")

    @property
    def arch(self) -> str:
        if self.env == "cartpole":
            return "plain_mlp" if self.variant == "plain" else "mlp_cartpole"
        return "plain_cnn" if self.variant == "plain" else "cnn_gridworld"

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)


def build_for_config(config: TrainConfig) -> PolicyValueNet:
    variant = "equivariant" if config.variant == "plain" else config.variant
    return build_network(config.arch, basis_variant=variant, seed=config.seed,
                         width_divisor=config.width_divisor, depth=config.depth, init=config.init)


# --------------------------------------------------------------------------
# Policy heads working in log-probability space

@dataclass
class Head:
    """Forward result plus the matching backward into the network."""

    logp: np.ndarray  # [B, A]
    values: np.ndarray  # [B]
    backward: Callable[[np.ndarray, np.ndarray], None]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def make_head(net: PolicyValueNet, obs: np.ndarray, augment: str = "none") -> Head:
    """Run the network and return log-probabilities and values.

    For ``averaged`` the whole orbit goes through the network as one batch.
    """
    if augment != "averaged":
        logits, values = net.forward(obs)
        logp = _log_softmax(logits)

        def backward(dlogp, dvalues):
            p = np.exp(logp)
            net.backward(dlogp - p * dlogp.sum(axis=-1, keepdims=True), dvalues)

        return Head(logp, values, backward)

    reps = env_representations(net.env_id)
    group = reps.group
    G, B = group.order, obs.shape[0]
    batch = np.concatenate([transform_observation(net.env_id, g, obs) for g in range(G)])
    logits, values = net.forward(batch)
    probs = np.exp(_log_softmax(logits)).reshape(G, B, -1)
    pulled = np.stack([reps.policy.act(int(group.inverse[g]), probs[g]) for g in range(G)])
    p_avg = pulled.mean(axis=0)
    logp = np.log(np.maximum(p_avg, 1e-300))
    v_avg = values.reshape(G, B).mean(axis=0)

    def backward(dlogp, dvalues):
        dp = dlogp / np.maximum(p_avg, 1e-300) / G
        dl = np.empty_like(probs)
        for g in range(G):
            dpg = reps.policy.act_transpose(int(group.inverse[g]), dp)
            dl[g] = probs[g] * (dpg - (probs[g] * dpg).sum(axis=-1, keepdims=True))
        net.backward(dl.reshape(G * B, -1), np.tile(dvalues / G, G))

    return Head(logp, v_avg, backward)


# --------------------------------------------------------------------------
# Rollouts

@dataclass
class Rollout:
    obs: np.ndarray  # [T, N, ...]
    actions: np.ndarray  # [T, N]
    rewards: np.ndarray  # [T, N]
    dones: np.ndarray  # [T, N]
    log_probs: np.ndarray  # [T, N]
    values: np.ndarray  # [T, N]
    last_values: np.ndarray  # [N]
    next_obs: np.ndarray  # [N, ...]
    completed: list[float] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def n_envs(self) -> int:
        return self.actions.shape[1]

    def __post_init__(self):
        T, N = self.actions.shape
        for name in ("rewards", "dones", "log_probs", "values"):
            if getattr(self, name).shape != (T, N):
                raise ValueError(f"rollout field {name} has shape {getattr(self, name).shape}, expected {(T, N)}")
        if self.obs.shape[:2] != (T, N) or self.last_values.shape != (N,):
            raise ValueError("rollout observation/bootstrap shapes are inconsistent")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("rollout contains non-finite log-probabilities")


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((u[:, None] > cdf).sum(axis=-1), probs.shape[-1] - 1)


def collect_rollouts(net: PolicyValueNet, envs: VecEnv, horizon: int, rng: np.random.Generator,
                     obs: np.ndarray | None = None, augment: str = "none") -> Rollout:
    """Step every environment ``horizon`` times with actions sampled from the policy."""
    if obs is None:
        obs = envs.reset()
    obs_buf, act, rew, done, logp_buf, val = [], [], [], [], [], []
    completed: list[float] = []
    for _ in range(horizon):
        head = make_head(net, obs, "averaged" if augment == "averaged" else "none")
        a = _sample(np.exp(head.logp), rng)
        nxt, r, d = envs.step(a)
        completed += envs.completed
        obs_buf.append(obs)
        act.append(a)
        rew.append(r)
        done.append(d)
        logp_buf.append(head.logp[np.arange(len(a)), a])
        val.append(head.values)
        obs = nxt
    last = make_head(net, obs, "averaged" if augment == "averaged" else "none").values
    return Rollout(np.stack(obs_buf), np.stack(act), np.stack(rew), np.stack(done),
                   np.stack(logp_buf), np.stack(val), last, obs, completed)


def nstep_returns(rewards: np.ndarray, dones: np.ndarray, last_values: np.ndarray,
                  gamma: float) -> np.ndarray:
    """Discounted returns bootstrapped from ``last_values``, cut at episode ends."""
    ret = np.asarray(last_values, dtype=float).copy()
    out = np.zeros_like(rewards, dtype=float)
    for t in range(rewards.shape[0] - 1, -1, -1):
        ret = rewards[t] + gamma * ret * (1.0 - dones[t])
        out[t] = ret
    return out


# --------------------------------------------------------------------------
# Loss and optimiser

@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    grad_norm: float = 0.0


def a2c_loss(net: PolicyValueNet, obs: np.ndarray, actions: np.ndarray, advantages: np.ndarray,
             returns: np.ndarray, config: TrainConfig, old_log_probs: np.ndarray | None = None,
             backward: bool = True) -> LossReport:
    """Total loss ``policy + c_v * value - c_e * entropy`` on a flat batch.

    Advantages and returns are treated as constants. With ``backward`` the
    gradients are left in ``net.grads``.
    """
    head = make_head(net, obs, "averaged" if config.augment == "averaged" else "none")
    B = actions.shape[0]
    idx = np.arange(B)
    logp_a = head.logp[idx, actions]
    dlogp = np.zeros_like(head.logp)

    if config.clip_eps is None:
        policy_loss = -float(np.mean(logp_a * advantages))
        dlogp[idx, actions] = -advantages / B
    else:
        if old_log_probs is None:
            raise ValueError("clipped surrogate needs old_log_probs")
        ratio = np.exp(logp_a - old_log_probs)
        clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
        unclipped_active = ratio * advantages <= clipped * advantages
        policy_loss = -float(np.mean(np.minimum(ratio * advantages, clipped * advantages)))
        dlogp[idx, actions] = np.where(unclipped_active, -ratio * advantages / B, 0.0)

    p = np.exp(head.logp)
    plogp = np.where(p > 0, p * head.logp, 0.0)
    entropy = -float(plogp.sum(axis=-1).mean())
    dlogp += config.entropy_coef * (plogp + p) / B

    diff = head.values - returns
    value_loss = float(np.mean(diff ** 2))
    dvalues = config.value_coef * 2.0 * diff / B

    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    if not math.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss (policy {policy_loss}, value {value_loss}, entropy {entropy})")
    if backward:
        head.backward(dlogp, dvalues)
    return LossReport(policy_loss, value_loss, entropy, total)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "AdamState":
        return replace(self, m=[x.copy() for x in self.m], v=[x.copy() for x in self.v])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _clip_grads(grads: list[np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(norm):
        raise TrainingDivergedError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def _augment_batch(env_id: str, obs: np.ndarray, actions: np.ndarray,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    G = GROUP_ORDER[env_id]
    gs = rng.integers(G, size=obs.shape[0])
    out_obs = np.empty_like(obs)
    out_act = np.empty_like(actions)
    for g in range(G):
        sel = gs == g
        if sel.any():
            out_obs[sel] = transform_observation(env_id, g, obs[sel])
            out_act[sel] = [transform_action(env_id, g, a) for a in actions[sel]]
    return out_obs, out_act


def a2c_update(net: PolicyValueNet, rollout: Rollout, config: TrainConfig, adam: AdamState,
               rng: np.random.Generator | None = None) -> LossReport:
    """n-step returns, advantage = return - value, then ``update_epochs`` Adam steps."""
    returns = nstep_returns(rollout.rewards, rollout.dones, rollout.last_values, config.gamma)
    adv = (returns - rollout.values).reshape(-1)
    ret = returns.reshape(-1)
    obs = rollout.obs.reshape(-1, *rollout.obs.shape[2:])
    actions = rollout.actions.reshape(-1)
    old = rollout.log_probs.reshape(-1)
    if config.augment == "stochastic":
        obs, actions = _augment_batch(net.env_id, obs, actions, rng or np.random.default_rng())
        if config.clip_eps is not None:
            head = make_head(net, obs)
            old = head.logp[np.arange(len(actions)), actions]
    report = None
    for _ in range(config.update_epochs):
        report = a2c_loss(net, obs, actions, adv, ret, config, old_log_probs=old)
        grads = net.grads
        report.grad_norm = _clip_grads(grads, config.max_grad_norm)
        adam_step(net.params, grads, adam, config.lr)
    return report


# --------------------------------------------------------------------------
# Evaluation and training loop

def evaluate(net: PolicyValueNet, episodes: int = 20, seed: int = 0, augment: str = "none") -> np.ndarray:
    """Returns of ``episodes`` greedy (argmax) episodes, run as one batch."""
    envs = [make_env(net.env_id, seed + i) for i in range(episodes)]
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    mode = "averaged" if augment == "averaged" else "none"
    while active.any():
        idx = np.flatnonzero(active)
        actions = make_head(net, obs[idx], mode).logp.argmax(axis=-1)
        for j, a in zip(idx, actions):
            o, r, d = envs[j].step(a)
            returns[j] += r
            obs[j] = o
            if d:
                active[j] = False
    return returns


def _curve_row(config: TrainConfig, steps: int, returns: np.ndarray, residual: float | None) -> dict:
    p25, p50, p75 = np.percentile(returns, [25, 50, 75])
    row = dict(variant=config.variant, seed=config.seed, lr=config.lr, env_steps=steps,
               return_p25=float(p25), return_p50=float(p50), return_p75=float(p75),
               mean_return=float(returns.mean()))
    if residual is not None:
        row["equivariance_residual"] = residual
    return row


def train(config: TrainConfig, csv_path: str | Path | None = None,
          check_equivariance: bool = False, stop_at: float | None = None,
          log: Callable[[dict], None] | None = None) -> list[dict]:
    """Train from scratch and return the evaluation curve.

    Evaluation happens at step 0, every ``eval_interval`` environment steps
    and at the end. ``stop_at`` ends training early once the median
    evaluation return reaches it. Rows are appended to ``csv_path``.
    """
    net = build_for_config(config)
    rng = np.random.default_rng([config.seed, 1])
    envs = VecEnv(config.env, config.n_envs, base_seed=config.seed * 1000)
    eval_seed = 10_000_000 + config.seed * 1000
    adam = AdamState.zeros_like(net.params)
    obs = envs.reset()
    steps_per_update = config.n_envs * config.horizon
    curve: list[dict] = []

    def record(steps):
        returns = evaluate(net, config.eval_episodes, eval_seed, config.augment)
        residual = check_network_equivariance(net, n_states=64, seed=steps) if check_equivariance else None
        row = _curve_row(config, steps, returns, residual)
        curve.append(row)
        if log:
            log(row)
        return row

    row = record(0)
    steps, next_eval = 0, config.eval_interval
    while steps < config.total_steps and not (stop_at is not None and row["return_p50"] >= stop_at):
        rollout = collect_rollouts(net, envs, config.horizon, rng, obs, config.augment)
        obs = rollout.next_obs
        a2c_update(net, rollout, config, adam, rng)
        steps += steps_per_update
        if steps >= next_eval or steps >= config.total_steps:
            row = record(steps)
            next_eval += config.eval_interval
    if csv_path is not None:
        write_curve_csv(csv_path, curve, append=True)
    return curve


def write_curve_csv(path: str | Path, rows: Sequence[dict], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def sweep_lr(config: TrainConfig, lrs: Sequence[float] | None = None, seeds: Sequence[int] = (0,),
             csv_path: str | Path | None = None, **train_kw) -> dict[float, list[list[dict]]]:
    """Train every (lr, seed) pair; curves keyed by learning rate."""
    lrs = LR_GRIDS[config.env] if lrs is None else lrs
    results: dict[float, list[list[dict]]] = {}
    for lr in lrs:
        results[lr] = [train(replace(config, lr=lr, seed=s), csv_path, **train_kw) for s in seeds]
    return results


def best_lr(results: dict[float, list[list[dict]]]) -> float:
    """Learning rate with the highest median final return across seeds (ties: smaller lr)."""
    def score(lr):
        return float(np.median([c[-1]["return_p50"] for c in results[lr]]))
    return max(sorted(results), key=score)


def first_crossing(curves: Sequence[Sequence[dict]], threshold: float) -> float:
    """First evaluation step at which the across-seed median of ``return_p50`` reaches ``threshold``.

    Seeds that stopped early are padded with their last value. Returns
    ``inf`` when the threshold is never reached.
    """
    grid = sorted({r["env_steps"] for c in curves for r in c})
    for step in grid:
        vals = []
        for c in curves:
            upto = [r for r in c if r["env_steps"] <= step]
            vals.append(upto[-1]["return_p50"])
        if np.median(vals) >= threshold:
            return float(step)
    return math.inf
