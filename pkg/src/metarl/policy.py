"""Stochastic policies and value critics as differentiable graphs.

Both actors and critics are 2-hidden-layer (64, 64) tanh MLPs over flat
ParamVectors. Discrete actions use a categorical head over logits; continuous
actions use a Gaussian head with a state-independent learnable log-sigma
segment, sampled then clipped into the action interval (log-density is of the
pre-clip sample).

Bit-equality contract: `act` computes log-probabilities with exactly the same
operations, in the same order, as the `logprob`/`logprob_graph` recipe in
exact mode (einsum affine maps, max-shifted log-sum-exp). Sampling in a
lockstep batch therefore produces the same bits per trajectory as sampling
each trajectory alone, and `logprob(net, s, raw)` reproduces the logp
returned by `act` bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Params, Segment
from .envs import Environment
from .errors import NonFiniteValue, ParseError
from .rng import Stream

__all__ = [
    "CategoricalHead",
    "GaussianHead",
    "Arch",
    "PolicyNet",
    "CriticNet",
    "ActionSample",
    "actor_arch",
    "critic_arch",
    "init_params",
    "make_policy",
    "make_critic",
    "forward_inference",
    "act",
    "act_batch",
    "logprob",
    "logprob_graph",
    "value",
    "values_graph",
    "save_checkpoint",
    "load_checkpoint",
]

HIDDEN = (64, 64)
LOG_SIGMA_INIT = float(np.log(2.0))
HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CategoricalHead:
    n: int


@dataclass(frozen=True)
class GaussianHead:
    low: float
    high: float


@dataclass(frozen=True)
class Arch:
    """Layer plan. head None means a scalar regression output (critic)."""

    input_dim: int
    hidden: tuple[int, ...]
    head: "CategoricalHead | GaussianHead | None"

    @property
    def out_dim(self) -> int:
        if isinstance(self.head, CategoricalHead):
            return self.head.n
        return 1

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.out_dim)

    def segments(self) -> tuple[Segment, ...]:
        segs: list[Segment] = []
        off = 0
        sizes = self.layer_sizes
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            segs.append(Segment(f"W{i}", off, (a, b)))
            off += a * b
            segs.append(Segment(f"b{i}", off, (b,)))
            off += b
        if isinstance(self.head, GaussianHead):
            segs.append(Segment("log_sigma", off, (1,)))
        return tuple(segs)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass(frozen=True)
class PolicyNet:
    arch: Arch
    params: ParamVector

    def with_params(self, params: ParamVector) -> "PolicyNet":
        return PolicyNet(self.arch, params)


@dataclass(frozen=True)
class CriticNet:
    arch: Arch
    params: ParamVector

    def with_params(self, params: ParamVector) -> "CriticNet":
        return CriticNet(self.arch, params)


class ActionSample(NamedTuple):
    action: float | int
    logp: float
    raw: float | int  # pre-clip sample; the differentiation target


def actor_arch(env: Environment) -> Arch:
    spec = env.action_spec
    if spec.kind == "discrete":
        head: CategoricalHead | GaussianHead = CategoricalHead(spec.n)
    else:
        head = GaussianHead(spec.low, spec.high)
    return Arch(env.state_dim, HIDDEN, head)


def critic_arch(env: Environment) -> Arch:
    return Arch(env.state_dim, HIDDEN, None)


def init_params(arch: Arch, rng: "Stream | np.random.Generator") -> ParamVector:
    """Uniform(+-sqrt(3/fan_in)) weights (variance 1/fan_in), zero biases,
    log-sigma = log(2.0)."""
    gen = rng.generator() if isinstance(rng, Stream) else rng
    sizes = arch.layer_sizes
    chunks: list[np.ndarray] = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(3.0 / a)
        chunks.append(gen.uniform(-bound, bound, size=(a, b)).ravel())
        chunks.append(np.zeros(b))
    if isinstance(arch.head, GaussianHead):
        chunks.append(np.array([LOG_SIGMA_INIT]))
    return ParamVector(np.concatenate(chunks), arch.segments())


def make_policy(env: Environment, rng: "Stream | np.random.Generator") -> PolicyNet:
    arch = actor_arch(env)
    return PolicyNet(arch, init_params(arch, rng))


def make_critic(env: Environment, rng: "Stream | np.random.Generator") -> CriticNet:
    arch = critic_arch(env)
    return CriticNet(arch, init_params(arch, rng))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def forward_inference(arch: Arch, params: ParamVector, states: np.ndarray) -> np.ndarray:
    """Head outputs (n, out_dim) for a batch of states, plain numpy.

    Uses einsum for the affine maps: per-row results are independent of batch
    size, which the lockstep rollout and the act/logprob bit-equality
    contract rely on. Must mirror `_forward_graph` op for op.
    """
    h = np.asarray(states, dtype=np.float64)
    for i in range(arch.n_layers):
        w = params.segment(f"W{i}")
        b = params.segment(f"b{i}")
        h = np.einsum("ij,jk->ik", h, w) + b
        if i < arch.n_layers - 1:
            h = np.tanh(h)
    return h


def _forward_graph(arch: Arch, p: Params, states: np.ndarray, exact: bool) -> ad.Node:
    h: ad.Node = ad.const(np.asarray(states, dtype=np.float64))
    for i in range(arch.n_layers):
        h = ad.matmul(h, p.seg(f"W{i}"), exact=exact) + p.seg(f"b{i}")
        if i < arch.n_layers - 1:
            h = ad.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def act_batch(
    net: PolicyNet, states: np.ndarray, gens: "list[np.random.Generator]"
) -> "tuple[np.ndarray, np.ndarray, np.ndarray]":
    """Sample one action per row, row j drawing exactly one variate from
    gens[j]. Returns (actions, logps, raws); actions are env-ready (clipped
    for Gaussian heads), raws are the differentiation targets."""
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    out = forward_inference(net.arch, net.params, states)
    head = net.arch.head
    if isinstance(head, CategoricalHead):
        m = np.max(out, axis=1, keepdims=True)
        shift = out - m
        lse = np.log(np.sum(np.exp(shift), axis=1))
        probs = np.exp(shift - lse[:, None])
        cum = np.cumsum(probs, axis=1)
        acts = np.empty(n, dtype=np.int64)
        for j in range(n):
            u = gens[j].random()
            acts[j] = min(int(np.searchsorted(cum[j], u, side="right")), head.n - 1)
        logps = shift[np.arange(n), acts] - lse
        raws = acts
        actions: np.ndarray = acts
    elif isinstance(head, GaussianHead):
        mean = out[:, 0]
        logsig = net.params.segment("log_sigma")
        sigma = np.exp(logsig)[0]
        noise = np.array([gens[j].standard_normal() for j in range(n)])
        raws = mean + sigma * noise
        actions = np.clip(raws, head.low, head.high)
        # mirrors logprob_graph: z = (raw - mean) * exp(-log_sigma)
        z = (raws - mean) * np.exp(-logsig)
        logps = -0.5 * z * z - logsig - HALF_LOG_2PI
    else:
        raise ValueError("critic networks have no action head")
    if not np.all(np.isfinite(logps)):
        raise NonFiniteValue("sampled log-probability is not finite")
    return actions, logps, raws


def act(net: PolicyNet, state: np.ndarray, rng: "Stream | np.random.Generator") -> ActionSample:
    """Sample a single action; a batch of one through act_batch, so logp bits
    match lockstep sampling and logprob()."""
    gen = rng.generator() if isinstance(rng, Stream) else rng
    state = np.asarray(state, dtype=np.float64)
    actions, logps, raws = act_batch(net, state[None, :], [gen])
    a = actions[0]
    r = raws[0]
    if isinstance(net.arch.head, CategoricalHead):
        return ActionSample(int(a), float(logps[0]), int(r))
    return ActionSample(float(a), float(logps[0]), float(r))


# ---------------------------------------------------------------------------
# Differentiable log-probabilities and values
# ---------------------------------------------------------------------------

def logprob_graph(
    arch: Arch, p: Params, states: np.ndarray, actions: np.ndarray, exact: bool = False
) -> ad.Node:
    """(n,) log pi(a_j | s_j) as a graph over p. For Gaussian heads `actions`
    must be the raw pre-clip samples."""
    out = _forward_graph(arch, p, states, exact)
    head = arch.head
    if isinstance(head, CategoricalHead):
        shift = out - ad.row_max_const(out)
        lse = ad.log(ad.nsum(ad.exp(shift), axis=1))
        return ad.gather_rows(shift, np.asarray(actions, dtype=np.int64)) - lse
    if isinstance(head, GaussianHead):
        n = np.asarray(states).shape[0]
        mean = ad.reshape(out, (n,))
        raw = np.asarray(actions, dtype=np.float64)
        z = (ad.const(raw) - mean) * ad.exp(-p.seg("log_sigma"))
        return ad.const(-0.5) * z * z - p.seg("log_sigma") - ad.const(HALF_LOG_2PI)
    raise ValueError("critic networks have no action head")


def logprob(net: PolicyNet, state: np.ndarray, action) -> ad.Node:
    """Scalar log-probability node for one (state, action) pair; value is
    bit-equal to the logp produced by act() for the same raw sample."""
    p = Params(net.params)
    state = np.asarray(state, dtype=np.float64)
    lp = logprob_graph(net.arch, p, state[None, :], np.asarray([action]), exact=True)
    return ad.nsum(lp)


def values_graph(arch: Arch, p: Params, states: np.ndarray, exact: bool = False) -> ad.Node:
    """(n,) state values as a graph over critic params."""
    out = _forward_graph(arch, p, states, exact)
    return ad.reshape(out, (np.asarray(states).shape[0],))


def value(critic: CriticNet, state: np.ndarray) -> ad.Node:
    """Scalar value node for one state."""
    p = Params(critic.params)
    state = np.asarray(state, dtype=np.float64)
    return ad.nsum(values_graph(critic.arch, p, state[None, :], exact=True))


# ---------------------------------------------------------------------------
# Checkpoint container: named flat f64-LE vectors behind a layout header
# ---------------------------------------------------------------------------

_MAGIC = b"MRLP"
_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ParseError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def take_str(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.buf):
            raise ParseError("checkpoint truncated")
        s = self.buf[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def take_f64(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.pos + size > len(self.buf):
            raise ParseError("checkpoint truncated")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos)
        self.pos += size
        return arr.astype(np.float64)


def save_checkpoint(
    path, vectors: "dict[str, ParamVector]", meta: "dict[str, int] | None" = None
) -> None:
    """Write named parameter vectors plus integer metadata. Self-describing:
    magic, version, metadata pairs, then per vector its segment table and a
    flat little-endian f64 array."""
    meta = meta or {}
    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(meta))]
    for key, val in meta.items():
        parts.append(_pack_str(key))
        parts.append(struct.pack("<q", int(val)))
    parts.append(struct.pack("<I", len(vectors)))
    for name, pv in vectors.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", len(pv.segments)))
        for seg in pv.segments:
            parts.append(_pack_str(seg.name))
            parts.append(struct.pack("<QI", seg.offset, len(seg.shape)))
            parts.append(struct.pack(f"<{len(seg.shape)}Q", *seg.shape))
        parts.append(struct.pack("<Q", pv.size))
        parts.append(np.ascontiguousarray(pv.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> "tuple[dict[str, ParamVector], dict[str, int]]":
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.buf[:4]
    rd.pos = 4
    if magic != _MAGIC:
        raise ParseError(f"not a parameter checkpoint (magic {magic!r})")
    (version,) = rd.take("<I")
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    (n_meta,) = rd.take("<I")
    meta: dict[str, int] = {}
    for _ in range(n_meta):
        key = rd.take_str()
        (val,) = rd.take("<q")
        meta[key] = val
    (n_vecs,) = rd.take("<I")
    vectors: dict[str, ParamVector] = {}
    for _ in range(n_vecs):
        name = rd.take_str()
        (n_segs,) = rd.take("<I")
        segs = []
        for _ in range(n_segs):
            seg_name = rd.take_str()
            offset, ndim = rd.take("<QI")
            shape = rd.take(f"<{ndim}Q") if ndim else ()
            segs.append(Segment(seg_name, int(offset), tuple(int(d) for d in shape)))
        (size,) = rd.take("<Q")
        values = rd.take_f64(int(size))
        vectors[name] = ParamVector(values, segs)
    return vectors, meta
