"""Trajectory collection, discounted returns, and learner objectives.

Rollouts are deterministic by stream derivation, not scheduling: trajectory j
of a batch draws from the child stream rng.child(j), so serial, parallel, and
lockstep execution all produce identical bits. The lockstep driver steps every
still-active episode of a batch together; the policy's einsum forward and the
environments' elementwise stepping guarantee each row matches a solo rollout
bit for bit.

Objectives canonicalize trajectory order (sorting by content) before pooling,
making the surrogate bit-invariant to the order trajectories arrive in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import instrument
from .autodiff import Params
from .envs import Environment, Task, TaskDistribution, make_env, sample_tasks
from .policy import (
    PolicyNet,
    act_batch,
    actor_arch,
    critic_arch,
    forward_inference,
    logprob_graph,
    values_graph,
)
from .rng import Stream

__all__ = [
    "Trajectory",
    "TrajectoryBatch",
    "rollout",
    "sample_batch",
    "discounted_returns",
    "reinforce_objective",
    "actor_critic_objective",
    "policy_objective",
    "critic_objective",
    "eval_return",
    "eval_returns",
]

ADV_STD_FLOOR = 1e-12
ADV_STD_EPS = 1e-8


@dataclass(frozen=True)
class Trajectory:
    """One episode. `raws` are the differentiation targets: pre-clip samples
    for Gaussian heads, the action indices themselves for categorical."""

    states: np.ndarray  # (T, d)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    logps: np.ndarray  # (T,)
    raws: np.ndarray  # (T,)

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.logps) == len(self.raws) == n):
            raise ValueError("trajectory fields have mismatched lengths")
        if n == 0:
            raise ValueError("empty trajectory")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("trajectory rewards must be finite")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass(frozen=True)
class TrajectoryBatch:
    trajectories: "tuple[Trajectory, ...]"
    task: Task

    def __post_init__(self):
        if len(self.trajectories) < 1:
            raise ValueError("a batch needs at least one trajectory")

    @property
    def k(self) -> int:
        return len(self.trajectories)


def _run_rollouts(env: Environment, policy: PolicyNet, gens: "list[np.random.Generator]") -> "list[Trajectory]":
    """Lockstep rollouts: reset each episode from its own generator, then step
    all active episodes together until done or horizon."""
    k = len(gens)
    states = np.stack([env.reset(g) for g in gens])
    rec: list[tuple[list, list, list, list, list]] = [([], [], [], [], []) for _ in range(k)]
    active = list(range(k))
    t = 0
    while active and t < env.horizon:
        cur = states[np.asarray(active)]
        acts, logps, raws = act_batch(policy, cur, [gens[j] for j in active])
        nxt, rews, dones = env.step_batch(cur, acts)
        for m, j in enumerate(active):
            r = rec[j]
            r[0].append(cur[m])
            r[1].append(acts[m])
            r[2].append(rews[m])
            r[3].append(logps[m])
            r[4].append(raws[m])
        states[np.asarray(active)] = nxt
        active = [j for m, j in enumerate(active) if not dones[m]]
        t += 1
    instrument.COUNTERS.rollouts += k
    return [
        Trajectory(
            states=np.array(r[0]),
            actions=np.array(r[1]),
            rewards=np.array(r[2]),
            logps=np.array(r[3]),
            raws=np.array(r[4]),
        )
        for r in rec
    ]


def rollout(env: Environment, policy: PolicyNet, rng: "Stream | np.random.Generator") -> Trajectory:
    """One episode under the policy; reset and every action draw come from
    `rng` in step order."""
    gen = rng.generator() if isinstance(rng, Stream) else rng
    return _run_rollouts(env, policy, [gen])[0]


def sample_batch(env: Environment, policy: PolicyNet, k: int, rng: Stream) -> TrajectoryBatch:
    """k rollouts on child streams rng.child(0..k-1); execution order cannot
    affect the result."""
    if k < 1:
        raise ValueError("need at least one trajectory")
    if not isinstance(rng, Stream):
        raise TypeError("sample_batch derives per-trajectory streams; pass a Stream")
    gens = [rng.child(j).generator() for j in range(k)]
    return TrajectoryBatch(tuple(_run_rollouts(env, policy, gens)), env.task)


def discounted_returns(traj: "Trajectory | np.ndarray", gamma: float) -> np.ndarray:
    """G_t = sum_{k>=t} gamma^(k-t) r_k by backward recursion."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _traj_sort_key(t: Trajectory):
    return (
        t.length,
        t.states.tobytes(),
        t.raws.tobytes(),
        t.rewards.tobytes(),
    )


def _pooled(batch: TrajectoryBatch, gamma: float):
    """Canonically ordered (states, raw targets, returns) across the batch."""
    trajs = sorted(batch.trajectories, key=_traj_sort_key)
    states = np.vstack([t.states for t in trajs])
    targets = np.concatenate([t.raws for t in trajs])
    returns = np.concatenate([discounted_returns(t, gamma) for t in trajs])
    return states, targets, returns


def reinforce_objective(
    policy_params: Params, batch: TrajectoryBatch, gamma: float, standardize: bool = True
) -> ad.Node:
    """Score-function surrogate (1/K) sum_traj sum_t log pi(a_t|s_t) * A_t.

    A_t is the batch-standardized discounted return (mean removed, divided by
    std + 1e-8). A batch with (numerically) identical returns would divide by
    ~0, so it falls back to the unstandardized returns instead.
    """
    arch = actor_arch(make_env(batch.task))
    states, targets, returns = _pooled(batch, gamma)
    if standardize:
        std = float(np.std(returns))
        if std < ADV_STD_FLOOR:
            adv = returns  # degenerate batch: no spread to normalize by
        else:
            adv = (returns - np.mean(returns)) / (std + ADV_STD_EPS)
    else:
        adv = returns
    lp = logprob_graph(arch, policy_params, states, targets)
    return ad.nsum(lp * ad.const(adv)) * (1.0 / batch.k)


def actor_critic_objective(
    policy_params: Params, critic_params: Params, batch: TrajectoryBatch, gamma: float
) -> "tuple[ad.Node, ad.Node]":
    """Policy surrogate with advantages A_t = G_t - V(s_t) (critic values
    entering as constants), plus the critic's mean-squared-error node.
    Maximize the first, minimize the second.
    """
    env = make_env(batch.task)
    a_arch = actor_arch(env)
    c_arch = critic_arch(env)
    states, targets, returns = _pooled(batch, gamma)
    critic_pv = ad.ParamVector(critic_params.vec.val, critic_params.layout)
    v = forward_inference(c_arch, critic_pv, states)[:, 0]
    adv = returns - v
    lp = logprob_graph(a_arch, policy_params, states, targets)
    policy_node = ad.nsum(lp * ad.const(adv)) * (1.0 / batch.k)
    diff = values_graph(c_arch, critic_params, states) - ad.const(returns)
    critic_node = ad.nmean(diff * diff)
    return policy_node, critic_node


def policy_objective(
    batch: TrajectoryBatch,
    gamma: float,
    learner: str = "pg",
    critic_pv: "ad.ParamVector | None" = None,
) -> "Callable[[Params], ad.Node]":
    """Callable policy surrogate for a frozen batch: the standardized
    score-function objective for the "pg" learner, or the advantage
    (G - V(s)) form for "ac" with the given critic held constant. Values
    and gradients match reinforce_objective / actor_critic_objective bit
    for bit."""
    if learner == "pg":
        return lambda p: reinforce_objective(p, batch, gamma)
    if learner != "ac":
        raise ValueError(f"unknown learner {learner!r}")
    if critic_pv is None:
        raise ValueError("actor-critic objective needs critic parameters")
    env = make_env(batch.task)
    a_arch = actor_arch(env)
    states, targets, returns = _pooled(batch, gamma)
    v = forward_inference(critic_arch(env), critic_pv, states)[:, 0]
    adv = returns - v

    def obj(p: Params) -> ad.Node:
        lp = logprob_graph(a_arch, p, states, targets)
        return ad.nsum(lp * ad.const(adv)) * (1.0 / batch.k)

    return obj


def critic_objective(batch: TrajectoryBatch, gamma: float) -> "Callable[[Params], ad.Node]":
    """Callable critic mean-squared-error against discounted returns."""
    c_arch = critic_arch(make_env(batch.task))
    states, _, returns = _pooled(batch, gamma)

    def obj(pc: Params) -> ad.Node:
        diff = values_graph(c_arch, pc, states) - ad.const(returns)
        return ad.nmean(diff * diff)

    return obj


def eval_returns(
    target: "Environment | TaskDistribution",
    policy: PolicyNet,
    n_episodes: int,
    rng: "Stream | np.random.Generator",
) -> np.ndarray:
    """Undiscounted return of each evaluation episode. On a distribution, a
    fresh task is drawn per episode; no learning happens."""
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if isinstance(target, TaskDistribution):
        totals = np.empty(n_episodes)
        for e in range(n_episodes):
            if isinstance(rng, Stream):
                task = sample_tasks(target, 1, rng.child(e, 0))[0]
                traj = rollout(make_env(task), policy, rng.child(e, 1))
            else:
                task = sample_tasks(target, 1, rng)[0]
                traj = rollout(make_env(task), policy, rng)
            totals[e] = traj.total_return
        return totals
    if isinstance(rng, Stream):
        batch = sample_batch(target, policy, n_episodes, rng)
        return np.array([t.total_return for t in batch.trajectories])
    return np.array([rollout(target, policy, rng).total_return for _ in range(n_episodes)])


def eval_return(
    target: "Environment | TaskDistribution",
    policy: PolicyNet,
    n_episodes: int,
    rng: "Stream | np.random.Generator",
) -> float:
    """Mean undiscounted return over n evaluation episodes."""
    return float(np.mean(eval_returns(target, policy, n_episodes, rng)))
