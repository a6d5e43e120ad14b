"""Meta-learning algorithms over task distributions.

Implements four base algorithms and their task-directed variants:

* maml — exact bilevel meta-gradient: per task, one inner ascent step on a
  pre-adaptation batch, then the outer gradient on a post-adaptation batch
  corrected by a Hessian-vector product through the inner surrogate.
* fomaml — the same with the Hessian term dropped.
* reptile — per task, several plain adaptation steps; the meta-update moves
  the initialization toward the average adapted parameters.
* metasgd — maml plus a learned per-parameter inner step-size vector,
  updated from the elementwise product of inner and outer gradients.
* directed-{maml,fomaml,metasgd} — before the base epoch body, one
  first-order ascent step of size delta on the distribution's medium task
  (the task at the mean parameter). The prestep adds exactly one gradient
  evaluation and K rollouts per epoch and never any second-order work;
  delta must stay below the outer step size beta.

The outer update adds the plain sum of per-task terms (no 1/M averaging), so
beta effectively scales with M; reptile is the exception, averaging by
construction.

Randomness is organized as a key-derived stream tree rooted at the config
seed: policy init, critic init, then per epoch a subtree covering the
prestep, task sampling, per-task inner/outer batches, and evaluation.
Results therefore depend only on the tree position of each draw, never on
execution order, which makes runs reproducible, resumable from checkpoints,
and safe to parallelize.
"""

from __future__ import annotations

import enum
import hashlib
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import __version__
from . import autodiff as ad
from . import rl
from .autodiff import Gradient, ParamVector, Params
from .envs import (
    Environment,
    Family,
    Task,
    TaskDistribution,
    make_env,
    medium_task,
    sample_tasks,
)
from .errors import EmptyTaskSet, EpochDiverged, NonFiniteValue, ValidationError
from .policy import (
    PolicyNet,
    actor_arch,
    critic_arch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .rng import Stream
from .runlog import EpochMetrics, RunLog, detect_convergence, ema_smooth, fmt_float, save_runlog

__all__ = [
    "Algorithm",
    "Learner",
    "MetaConfig",
    "RunConfig",
    "MetaState",
    "MetaProblem",
    "RLProblem",
    "init_state",
    "inner_adapt",
    "maml_meta_gradient",
    "fomaml_meta_gradient",
    "reptile_step",
    "metasgd_step",
    "directed_prestep",
    "evaluate_policy",
    "load_state",
    "train_epoch",
    "train",
    "canonical_text",
    "fingerprint",
    "CONFIG_KEYS",
    "EMA_FACTOR",
    "ALPHA_VEC_FLOOR",
    "CHECKPOINT_INTERVAL",
]

EMA_FACTOR = 0.9  # smoothing used by the convergence rule and plots
ALPHA_VEC_FLOOR = 1e-6
CHECKPOINT_INTERVAL = 50
REPTILE_INNER_STEPS = 3
DEFAULT_EVAL_EPISODES = 4


class Algorithm(enum.Enum):
    MAML = "maml"
    FOMAML = "fomaml"
    REPTILE = "reptile"
    METASGD = "metasgd"
    DIRECTED_MAML = "directed-maml"
    DIRECTED_FOMAML = "directed-fomaml"
    DIRECTED_METASGD = "directed-metasgd"

    @staticmethod
    def parse(name: "str | Algorithm") -> "Algorithm":
        if isinstance(name, Algorithm):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for algo in Algorithm:
            if algo.value == key:
                return algo
        raise ValidationError(f"algorithm: unknown value {name!r}")

    @property
    def directed(self) -> bool:
        return self.value.startswith("directed-")

    @property
    def base(self) -> "Algorithm":
        if self.directed:
            return Algorithm(self.value.removeprefix("directed-"))
        return self


class Learner(enum.Enum):
    PG = "pg"
    AC = "ac"

    @staticmethod
    def parse(name: "str | Learner") -> "Learner":
        if isinstance(name, Learner):
            return name
        key = str(name).strip().lower()
        for lrn in Learner:
            if lrn.value == key:
                return lrn
        raise ValidationError(f"learner: unknown value {name!r}")


@dataclass(frozen=True)
class MetaConfig:
    algorithm: Algorithm
    learner: Learner
    env: Family
    phi_lo: float
    phi_hi: float
    alpha: float
    beta: float
    delta: float
    gamma: float
    m_tasks: int
    k_trajs: int
    horizon: int
    epochs: int
    seed: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha: inner step size must be > 0")
        if not self.beta > 0:
            raise ValidationError("beta: outer step size must be > 0")
        if self.delta < 0:
            raise ValidationError("delta: prestep size must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValidationError("gamma: discount must lie in (0, 1]")
        for field in ("m_tasks", "k_trajs", "horizon", "epochs"):
            if getattr(self, field) < 1:
                raise ValidationError(f"{field}: must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed: must be >= 0")
        if not self.phi_lo < self.phi_hi:
            raise ValidationError("phi_lo: parameter interval is empty (need phi_lo < phi_hi)")
        if self.algorithm.directed and not self.delta < self.beta:
            raise ValidationError(
                f"delta: directed prestep size must be smaller than beta "
                f"({fmt_float(self.delta)} >= {fmt_float(self.beta)})"
            )

    @property
    def dist(self) -> TaskDistribution:
        return TaskDistribution(self.env, self.phi_lo, self.phi_hi)


@dataclass(frozen=True)
class RunConfig:
    """MetaConfig plus the experiment-protocol knobs around it."""

    meta: MetaConfig
    eval_every: int = 1
    eval_episodes: int = DEFAULT_EVAL_EPISODES
    conv_tau: float = 175.0
    conv_window: int = 20
    out_dir: str = "runs"
    label: str = "run"

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValidationError("eval_every: must be >= 1")
        if self.eval_episodes < 1:
            raise ValidationError("eval_episodes: must be >= 1")
        if self.conv_window < 1:
            raise ValidationError("conv_window: must be >= 1")
        if not np.isfinite(self.conv_tau):
            raise ValidationError("conv_tau: must be finite")
        if not self.label:
            raise ValidationError("label: must be nonempty")


@dataclass(frozen=True)
class MetaState:
    theta: ParamVector
    critic: ParamVector | None
    alpha_vec: ParamVector | None
    epoch: int
    rng: Stream

    def __post_init__(self):
        if self.alpha_vec is not None:
            if not self.alpha_vec.layout_equal(self.theta):
                raise ValueError("alpha_vec layout must match theta")
            if not np.all(self.alpha_vec.values > 0):
                raise ValueError("alpha_vec must be strictly positive")


# Config keys in canonical order; also the accepted config-file vocabulary.
CONFIG_KEYS = (
    "algorithm",
    "learner",
    "env",
    "phi_lo",
    "phi_hi",
    "alpha",
    "beta",
    "delta",
    "gamma",
    "m_tasks",
    "k_trajs",
    "horizon",
    "epochs",
    "seed",
    "eval_every",
    "eval_episodes",
    "conv_tau",
    "conv_window",
    "out_dir",
    "label",
)


def canonical_text(cfg: RunConfig) -> str:
    m = cfg.meta
    values = {
        "algorithm": m.algorithm.value,
        "learner": m.learner.value,
        "env": m.env.value,
        "phi_lo": fmt_float(m.phi_lo),
        "phi_hi": fmt_float(m.phi_hi),
        "alpha": fmt_float(m.alpha),
        "beta": fmt_float(m.beta),
        "delta": fmt_float(m.delta),
        "gamma": fmt_float(m.gamma),
        "m_tasks": str(m.m_tasks),
        "k_trajs": str(m.k_trajs),
        "horizon": str(m.horizon),
        "epochs": str(m.epochs),
        "seed": str(m.seed),
        "eval_every": str(cfg.eval_every),
        "eval_episodes": str(cfg.eval_episodes),
        "conv_tau": fmt_float(cfg.conv_tau),
        "conv_window": str(cfg.conv_window),
        "out_dir": cfg.out_dir,
        "label": cfg.label,
    }
    return "\n".join(f"{k}={values[k]}" for k in CONFIG_KEYS) + "\n"


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Problems: objective factories the algorithms run against
# ---------------------------------------------------------------------------

class MetaProblem(Protocol):
    """What an algorithm needs from its domain: a per-task pre-adaptation
    objective (built at theta) and a post-adaptation objective (built at the
    adapted parameters). Both return graph-building callables over Params."""

    def inner_objective(
        self, task, theta: ParamVector, rng: Stream
    ) -> Callable[[Params], ad.Node]: ...

    def outer_objective(
        self, task, theta_adapted: ParamVector, rng: Stream
    ) -> Callable[[Params], ad.Node]: ...


class RLProblem:
    """Rollout-backed objectives: sampling K trajectories under the given
    parameters, then the learner's surrogate over the frozen batch.

    For the actor-critic learner this object owns the critic: every training
    batch use applies one critic descent step, taken after the policy
    surrogate has captured the pre-update critic values. Evaluation code
    turns `train_critic` off so measuring performance never mutates state.
    """

    def __init__(self, cfg: MetaConfig, critic: ParamVector | None = None, train_critic: bool = True):
        self.cfg = cfg
        self.critic = critic
        self.train_critic = train_critic
        if cfg.learner is Learner.AC and critic is None:
            raise ValueError("actor-critic learner needs a critic parameter vector")
        self._arch_env = self.env_for(medium_task(cfg.dist))

    def env_for(self, task: Task) -> Environment:
        env = make_env(task)
        env.horizon = self.cfg.horizon
        return env

    @property
    def actor_arch(self):
        return actor_arch(self._arch_env)

    def sample(self, task: Task, theta: ParamVector, rng: Stream) -> rl.TrajectoryBatch:
        policy = PolicyNet(self.actor_arch, theta)
        return rl.sample_batch(self.env_for(task), policy, self.cfg.k_trajs, rng)

    def objective(self, batch: rl.TrajectoryBatch) -> Callable[[Params], ad.Node]:
        if self.cfg.learner is Learner.PG:
            return rl.policy_objective(batch, self.cfg.gamma, "pg")
        obj = rl.policy_objective(batch, self.cfg.gamma, "ac", self.critic)
        if self.train_critic:
            g = ad.grad(rl.critic_objective(batch, self.cfg.gamma), self.critic)
            self.critic = self.critic - self.cfg.alpha * g
        return obj

    def inner_objective(self, task, theta, rng):
        return self.objective(self.sample(task, theta, rng))

    def outer_objective(self, task, theta_adapted, rng):
        return self.objective(self.sample(task, theta_adapted, rng))


# ---------------------------------------------------------------------------
# Algorithm steps
# ---------------------------------------------------------------------------

def init_state(cfg: MetaConfig) -> MetaState:
    root = Stream(cfg.seed)
    env = make_env(medium_task(cfg.dist))
    theta = init_params(actor_arch(env), root.child(0))
    critic = init_params(critic_arch(env), root.child(1)) if cfg.learner is Learner.AC else None
    alpha_vec = None
    if cfg.algorithm.base is Algorithm.METASGD:
        alpha_vec = theta.with_values(np.full(theta.size, cfg.alpha))
    return MetaState(theta=theta, critic=critic, alpha_vec=alpha_vec, epoch=0, rng=root)


def inner_adapt(
    theta: ParamVector,
    objective: "Callable[[Params], ad.Node] | rl.TrajectoryBatch",
    alpha: "float | ParamVector",
    gamma: float | None = None,
    learner: Learner = Learner.PG,
    critic: ParamVector | None = None,
) -> ParamVector:
    """One ascent step: theta + alpha * grad (elementwise when alpha is a
    per-parameter vector). Accepts a ready objective callable or a raw
    trajectory batch plus learner context."""
    if isinstance(objective, rl.TrajectoryBatch):
        if gamma is None:
            raise ValueError("gamma required when adapting from a raw batch")
        objective = rl.policy_objective(objective, gamma, learner.value, critic)
    g = ad.grad(objective, theta)
    if isinstance(alpha, ParamVector):
        return theta + alpha.hadamard(g)
    return theta + float(alpha) * g


def _check_tasks(tasks) -> list:
    tasks = list(tasks)
    if not tasks:
        raise EmptyTaskSet("no tasks to meta-train on")
    return tasks


def _per_task_terms(
    theta: ParamVector,
    tasks,
    alpha: "float | ParamVector",
    rng: Stream,
    problem: MetaProblem,
    second_order: bool,
):
    """Shared maml/fomaml/metasgd loop. Yields (g_inner, g_outer, term) per
    task, where term = g_outer [+ hvp(inner, theta, alpha*g_outer)]."""
    for i, task in enumerate(_check_tasks(tasks)):
        inner = problem.inner_objective(task, theta, rng.child(i, 0))
        g_in = ad.grad(inner, theta)
        theta_i = theta + (alpha.hadamard(g_in) if isinstance(alpha, ParamVector) else float(alpha) * g_in)
        outer = problem.outer_objective(task, theta_i, rng.child(i, 1))
        g_out = ad.grad(outer, theta_i)
        term = g_out
        if second_order:
            v = alpha.hadamard(g_out) if isinstance(alpha, ParamVector) else float(alpha) * g_out
            term = term + ad.hvp(inner, theta, v)
        yield g_in, g_out, term


def maml_meta_gradient(
    theta: ParamVector, tasks, cfg: MetaConfig, rng: Stream, problem: MetaProblem | None = None
) -> Gradient:
    """Sum over tasks of (I + alpha*H_inner) @ g_outer, the exact bilevel
    meta-gradient with one inner step; one Hessian-vector product per task."""
    problem = problem if problem is not None else RLProblem(cfg)
    total = np.zeros(theta.size)
    for _, _, term in _per_task_terms(theta, tasks, cfg.alpha, rng, problem, second_order=True):
        total = total + term.values
    return theta.with_values(total)


def fomaml_meta_gradient(
    theta: ParamVector, tasks, cfg: MetaConfig, rng: Stream, problem: MetaProblem | None = None
) -> Gradient:
    """MAML with the Hessian term dropped: sum of post-adaptation gradients."""
    problem = problem if problem is not None else RLProblem(cfg)
    total = np.zeros(theta.size)
    for _, _, term in _per_task_terms(theta, tasks, cfg.alpha, rng, problem, second_order=False):
        total = total + term.values
    return theta.with_values(total)


def reptile_step(
    theta: ParamVector,
    tasks,
    cfg: MetaConfig,
    rng: Stream,
    problem: MetaProblem | None = None,
    n_inner: int = REPTILE_INNER_STEPS,
) -> ParamVector:
    """theta + beta * mean_i(theta'_i - theta) after n_inner plain adaptation
    steps per task, each on a freshly sampled batch."""
    problem = problem if problem is not None else RLProblem(cfg)
    tasks = _check_tasks(tasks)
    delta_sum = np.zeros(theta.size)
    for i, task in enumerate(tasks):
        cur = theta
        for s in range(n_inner):
            obj = problem.inner_objective(task, cur, rng.child(i, s))
            cur = cur + cfg.alpha * ad.grad(obj, cur)
        delta_sum = delta_sum + (cur.values - theta.values)
    return theta.with_values(theta.values + cfg.beta * (delta_sum / len(tasks)))


def metasgd_step(
    state: MetaState, tasks, cfg: MetaConfig, rng: Stream, problem: MetaProblem | None = None
) -> MetaState:
    """MAML-style update with a learned per-parameter inner rate vector:
    theta gets the exact second-order term through alpha_vec, alpha_vec moves
    along the outer objective's elementwise gradient g_inner * g_outer and is
    clamped positive."""
    if state.alpha_vec is None:
        raise ValueError("metasgd_step needs alpha_vec in the state")
    problem = problem if problem is not None else RLProblem(cfg)
    theta, avec = state.theta, state.alpha_vec
    total_theta = np.zeros(theta.size)
    total_alpha = np.zeros(theta.size)
    for g_in, g_out, term in _per_task_terms(theta, tasks, avec, rng, problem, second_order=True):
        total_theta = total_theta + term.values
        total_alpha = total_alpha + g_in.values * g_out.values
    new_theta = theta.with_values(theta.values + cfg.beta * total_theta)
    new_avec = avec.with_values(
        np.maximum(avec.values + cfg.beta * total_alpha, ALPHA_VEC_FLOOR)
    )
    return replace(state, theta=new_theta, alpha_vec=new_avec)


def _prestep(
    theta: ParamVector, cfg: MetaConfig, rng: Stream, problem: MetaProblem
) -> "tuple[ParamVector, float]":
    """One first-order ascent step of size delta on the medium task; returns
    the new parameters and the prestep gradient norm."""
    med = medium_task(cfg.dist)
    obj = problem.inner_objective(med, theta, rng)
    g = ad.grad(obj, theta)
    return theta + cfg.delta * g, g.norm()


def directed_prestep(
    theta: ParamVector,
    dist: TaskDistribution,
    cfg: MetaConfig,
    rng: Stream,
    problem: MetaProblem | None = None,
) -> ParamVector:
    """Task-directed pre-adaptation: K trajectories on the medium task of
    `dist` under the current policy, then theta + delta * grad. First-order
    only; adds exactly one gradient evaluation."""
    if dist != cfg.dist:
        cfg = replace(cfg, phi_lo=dist.phi_lo, phi_hi=dist.phi_hi, env=dist.family)
    problem = problem if problem is not None else RLProblem(cfg)
    return _prestep(theta, cfg, rng, problem)[0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def evaluate_policy(
    theta: ParamVector,
    critic: ParamVector | None,
    alpha: "float | ParamVector",
    cfg: MetaConfig,
    rng: Stream,
    eval_episodes: int,
) -> float:
    """Post-adaptation performance: M fresh tasks; per task, one inner step
    from a K-trajectory batch, then eval_episodes rollouts of the adapted
    policy. Critic is read, never written."""
    problem = RLProblem(cfg, critic=critic, train_critic=False)
    tasks = sample_tasks(cfg.dist, cfg.m_tasks, rng.child(0))
    totals: list[float] = []
    for i, task in enumerate(tasks):
        obj = problem.inner_objective(task, theta, rng.child(1, i, 0))
        adapted = inner_adapt(theta, obj, alpha)
        env = problem.env_for(task)
        policy = PolicyNet(problem.actor_arch, adapted)
        returns = rl.eval_returns(env, policy, eval_episodes, rng.child(1, i, 1))
        totals.extend(returns.tolist())
    return float(np.mean(totals))


def train_epoch(
    state: MetaState,
    cfg: MetaConfig,
    eval_episodes: int = DEFAULT_EVAL_EPISODES,
    evaluate: bool = True,
) -> "tuple[MetaState, EpochMetrics]":
    """One epoch: optional directed prestep, sample M tasks, run the base
    algorithm's inner/outer updates, then evaluate the new parameters.
    Non-finite values anywhere surface as EpochDiverged with epoch context."""
    ep = state.rng.child(2, state.epoch)
    t0 = time.perf_counter()
    try:
        problem = RLProblem(cfg, critic=state.critic)
        theta = state.theta
        avec = state.alpha_vec
        prestep_norm: float | None = None
        if cfg.algorithm.directed:
            theta, prestep_norm = _prestep(theta, cfg, ep.child(0), problem)
        tasks = sample_tasks(cfg.dist, cfg.m_tasks, ep.child(1))
        base = cfg.algorithm.base
        if base is Algorithm.MAML:
            mg = maml_meta_gradient(theta, tasks, cfg, ep.child(2), problem)
            new_theta = theta + cfg.beta * mg
            outer_norm = mg.norm()
        elif base is Algorithm.FOMAML:
            mg = fomaml_meta_gradient(theta, tasks, cfg, ep.child(2), problem)
            new_theta = theta + cfg.beta * mg
            outer_norm = mg.norm()
        elif base is Algorithm.REPTILE:
            new_theta = reptile_step(theta, tasks, cfg, ep.child(2), problem)
            outer_norm = float(np.linalg.norm(new_theta.values - theta.values)) / cfg.beta
        elif base is Algorithm.METASGD:
            stepped = metasgd_step(replace(state, theta=theta), tasks, cfg, ep.child(2), problem)
            new_theta = stepped.theta
            avec = stepped.alpha_vec
            outer_norm = float(np.linalg.norm(new_theta.values - theta.values)) / cfg.beta
        else:  # pragma: no cover - enum is exhaustive
            raise ValueError(f"unhandled algorithm {cfg.algorithm}")
        t_train = time.perf_counter()
        eval_ret: float | None = None
        eval_sec: float | None = None
        if evaluate:
            eval_ret = evaluate_policy(
                new_theta,
                problem.critic,
                avec if avec is not None else cfg.alpha,
                cfg,
                ep.child(3),
                eval_episodes,
            )
            eval_sec = max(time.perf_counter() - t_train, 1e-9)
    except NonFiniteValue as e:
        raise EpochDiverged(state.epoch, e) from e
    metrics = EpochMetrics(
        epoch=state.epoch,
        eval_return=eval_ret,
        wall_seconds=max(t_train - t0, 1e-9),
        grad_norm_outer=outer_norm,
        prestep_grad_norm=prestep_norm,
        eval_seconds=eval_sec,
    )
    new_state = MetaState(
        theta=new_theta, critic=problem.critic, alpha_vec=avec, epoch=state.epoch + 1, rng=state.rng
    )
    return new_state, metrics


def _save_state(run_cfg: RunConfig, state: MetaState) -> Path:
    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vectors = {"policy": state.theta}
    if state.critic is not None:
        vectors["critic"] = state.critic
    if state.alpha_vec is not None:
        vectors["alpha_vec"] = state.alpha_vec
    path = out / f"{run_cfg.label}.ckpt"
    save_checkpoint(path, vectors, {"epoch": state.epoch, "seed": state.rng.root})
    return path


def load_state(path, cfg: MetaConfig) -> MetaState:
    """Rebuild a MetaState from a checkpoint; the stream tree is re-derived
    from the seed, so resumed runs replay exactly the draws the uninterrupted
    run would have made."""
    vectors, meta = load_checkpoint(path)
    if meta.get("seed") != cfg.seed:
        raise ValidationError(
            f"seed: checkpoint was written by seed {meta.get('seed')}, config says {cfg.seed}"
        )
    return MetaState(
        theta=vectors["policy"],
        critic=vectors.get("critic"),
        alpha_vec=vectors.get("alpha_vec"),
        epoch=int(meta["epoch"]),
        rng=Stream(cfg.seed),
    )


def train(
    run_cfg: RunConfig,
    resume_from=None,
    progress: "Callable[[EpochMetrics], None] | None" = None,
) -> RunLog:
    """Run all epochs, checkpointing every 50, then persist and return the
    RunLog (with the convergence epoch under the EMA-threshold rule). On
    divergence the partial log is still written, with the cause recorded."""
    cfg = run_cfg.meta
    state = load_state(resume_from, cfg) if resume_from is not None else init_state(cfg)
    rows: list[EpochMetrics] = []
    diverged: str | None = None
    t_start = time.perf_counter()
    for e in range(state.epoch, cfg.epochs):
        evaluate = (e % run_cfg.eval_every == 0) or (e == cfg.epochs - 1)
        try:
            state, metrics = train_epoch(
                state, cfg, eval_episodes=run_cfg.eval_episodes, evaluate=evaluate
            )
        except EpochDiverged as err:
            diverged = f"epoch {err.epoch}: {err.cause}"
            break
        rows.append(metrics)
        if progress is not None:
            progress(metrics)
        if (e + 1) % CHECKPOINT_INTERVAL == 0 or e == cfg.epochs - 1:
            _save_state(run_cfg, state)
    total_wall = max(time.perf_counter() - t_start, 1e-9)

    evaled = [r for r in rows if r.eval_return is not None]
    conv: int | None = None
    if evaled:
        smoothed = ema_smooth([r.eval_return for r in evaled], EMA_FACTOR)
        idx = detect_convergence(smoothed, run_cfg.conv_tau, run_cfg.conv_window)
        if idx is not None:
            conv = evaled[idx].epoch
    log = RunLog(
        fingerprint=fingerprint(run_cfg),
        version=__version__,
        label=run_cfg.label,
        rows=tuple(rows),
        total_wall_seconds=total_wall,
        convergence_epoch=conv,
        diverged=diverged,
    )
    save_runlog(run_cfg.out_dir, log)
    return log
