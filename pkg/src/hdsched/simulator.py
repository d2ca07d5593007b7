"""Closed-loop Monte-Carlo engine.

All replications advance together as rows of numpy arrays. Each
replication owns a Philox stream keyed by ``(seed, replication)`` and
draws its noise in fixed-size chunks, so its random numbers do not
depend on how many replications run next to it, nor on the policy.
Every slot consumes the same draws whatever the action, which gives
common random numbers across policies.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__, _kernel
from .channels import MarkovChannel, StaticChannel, channel_from_dict
from .dynamics import Action, SchedState, advance_indicators
from .plant import PlantModel
from .policies import (
    FullDuplexScheduler,
    OptimalScheduler,
    PersistentScheduler,
    RoundRobinScheduler,
    _as_action,
    make_scheduler,
)
from .stability import DIVERGENCE_GROWTH, DIVERGENCE_WINDOW, divergence_from_checkpoints

CHUNK = 1024
MAX_TRACE_POINTS = 2000
MIN_CYCLES = 100


class MissingPolicyError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a simulation run depends on.

    ``policy`` is one kind name or a list of them; ``sweep`` maps dotted
    keys (``channel.pc``) to value lists for grid runs.
    """

    plant: PlantModel
    channel: object
    policy: object = "optimal"
    K: int = 10_000
    replications: int = 100
    seed: int = 0
    bound: int = 20
    tol: float = 1e-8
    max_iter: int = 100_000
    x0: tuple = (1.0, -1.0)
    window: int = DIVERGENCE_WINDOW
    growth: float = DIVERGENCE_GROWTH
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"sim.K must be a positive integer, got {self.K}")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ValueError(f"sim.replications must be a positive integer, got {self.replications}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError(f"sim.seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.bound) != self.bound or self.bound < 3:
            raise ValueError(f"mdp.bound must be an integer >= 3, got {self.bound}")
        if len(self.x0) != self.plant.n:
            raise ValueError(f"sim.x0 must have {self.plant.n} entries, got {len(self.x0)}")
        if self.window < 1 or self.growth <= 1.0:
            raise ValueError("divergence window must be >= 1 and growth factor > 1")
        self.K, self.replications, self.seed, self.bound = (
            int(self.K), int(self.replications), int(self.seed), int(self.bound))
        self.x0 = tuple(float(v) for v in self.x0)

    @property
    def policies(self):
        return [self.policy] if isinstance(self.policy, str) else list(self.policy)

    def to_dict(self):
        return {
            "plant": self.plant.to_dict(),
            "channel": self.channel.to_dict(),
            "policy": {"kind": self.policy if isinstance(self.policy, str) else list(self.policy)},
            "sim": {"K": self.K, "replications": self.replications, "seed": self.seed, "x0": list(self.x0),
                    "window": self.window, "growth": self.growth},
            "mdp": {"bound": self.bound, "tol": self.tol, "max_iter": self.max_iter},
            "sweep": dict(self.sweep),
        }

    @classmethod
    def from_dict(cls, d):
        pl = dict(d["plant"])
        sim = d.get("sim", {})
        mdp = d.get("mdp", {})
        kw = {}
        for src, keys in ((sim, ("K", "replications", "seed", "x0", "window", "growth")),
                          (mdp, ("bound", "tol", "max_iter"))):
            kw.update({k: src[k] for k in keys if k in src})
        return cls(
            plant=PlantModel(pl["A"], pl["B"], pl["K"], pl["Q"], pl["R"], pl.get("v", 1)),
            channel=channel_from_dict(d["channel"]),
            policy=d.get("policy", {}).get("kind", "optimal"),
            sweep=dict(d.get("sweep", {})),
            **kw,
        )

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CycleStats:
    mean_S: float
    mean_L: float
    ratio: float
    n_cycles: int


@dataclass
class SimResult:
    policy: str
    slots: np.ndarray  # slot counts at which the running average is sampled
    running_avg: np.ndarray  # (replications, len(slots))
    final_costs: np.ndarray  # (replications,)
    action_freq: dict
    cycles: Optional[CycleStats]
    diverged: Optional[bool]
    checkpoints: np.ndarray  # mean running average at each divergence-window end
    metadata: dict
    per_slot: Optional[dict] = None

    @property
    def mean_cost(self):
        return float(self.final_costs.mean())

    @property
    def stderr(self):
        n = len(self.final_costs)
        return float(self.final_costs.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")

    @property
    def mean_trace(self):
        return self.running_avg.mean(axis=0)

    def tail_slope(self, frac=0.2):
        """Least-squares slope (cost per slot) of the mean running average
        over the last ``frac`` of the horizon."""
        k0 = self.slots[-1] * (1.0 - frac)
        sel = self.slots >= k0
        if sel.sum() < 2:
            raise ValueError("too few trace points in the tail window")
        return float(np.polyfit(self.slots[sel], self.mean_trace[sel], 1)[0])

    def summary(self):
        out = {
            "policy": self.policy,
            "mean_cost": self.mean_cost,
            "stderr": self.stderr,
            "action_freq": self.action_freq,
            "diverged": self.diverged,
            "cycles": asdict(self.cycles) if self.cycles is not None else None,
        }
        out.update(self.metadata)
        return out


def replication_rng(seed, rep):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep,))))


class _Streams:
    """Chunked per-replication draws: normals ``(N, C, n)`` and four
    uniforms ``(N, C, 4)`` for uplink outcome, downlink outcome and the
    two channel-state steps."""

    def __init__(self, seed, reps, n):
        self.rngs = [replication_rng(seed, r) for r in range(reps)]
        self.n = n
        self.pos = CHUNK

    def initial_uniforms(self):
        return np.array([g.random(2) for g in self.rngs])

    def next(self):
        if self.pos == CHUNK:
            self.z = np.stack([g.standard_normal((CHUNK, self.n)) for g in self.rngs])
            self.u = np.stack([g.random((CHUNK, 4)) for g in self.rngs])
            self.pos = 0
        i = self.pos
        self.pos += 1
        return self.z[:, i], self.u[:, i]


def _channel_arrays(channel):
    ch = channel.as_markov() if isinstance(channel, StaticChannel) else channel
    cum_s = np.cumsum(ch.D_s, axis=1)
    cum_c = np.cumsum(ch.D_c, axis=1)
    return ch, cum_s, cum_c


def _next_state(cum, h, u):
    nxt = (u[:, None] >= cum[h]).sum(axis=1)
    return np.minimum(nxt, cum.shape[1] - 1)


def _resolve_scheduler(config, scheduler):
    if scheduler is None:
        if len(config.policies) != 1:
            raise ValueError("config lists several policies; pass one scheduler")
        scheduler = config.policies[0]
    if isinstance(scheduler, str):
        if scheduler == "optimal":
            raise MissingPolicyError("optimal policy needs a solved table; pass a fitted OptimalScheduler")
        scheduler = make_scheduler(scheduler).fit(config.plant, config.channel)
    if isinstance(scheduler, OptimalScheduler):
        if not hasattr(scheduler, "policy_table_"):
            raise MissingPolicyError("OptimalScheduler is not fitted")
        _check_table(config, scheduler.policy_table_)
    return scheduler


def _check_table(config, table):
    sp = table.space
    fading = isinstance(config.channel, MarkovChannel)
    if sp.v != config.plant.v or sp.fading != fading or sp.bound != config.bound:
        raise ValueError(
            f"policy table (v={sp.v}, bound={sp.bound}, fading={sp.fading}) does not match "
            f"config (v={config.plant.v}, bound={config.bound}, fading={fading})"
        )
    if fading and tuple(sp.channel_dims) != config.channel.n_states:
        raise ValueError("policy table channel dimensions do not match the config")
    for key, obj in (("plant", config.plant), ("channel", config.channel)):
        if key in table.meta and table.meta[key] != obj.to_dict():
            raise ValueError(f"policy table was solved for a different {key}")


def _trace_slots(K):
    stride = max(1, math.ceil(K / MAX_TRACE_POINTS))
    slots = list(range(stride, K + 1, stride))
    if slots[-1] != K:
        slots.append(K)
    return np.array(slots, dtype=np.int64)


def _initial_channel(ch, u0):
    pi_s = np.cumsum(ch.stationary("up"))
    pi_c = np.cumsum(ch.stationary("down"))
    hs = np.minimum((u0[:, :1] >= pi_s[None, :]).sum(axis=1), len(pi_s) - 1)
    hc = np.minimum((u0[:, 1:] >= pi_c[None, :]).sum(axis=1), len(pi_c) - 1)
    return hs, hc


def _rule_of(sched):
    # exact types only: subclasses may override decide_batch
    kind = type(sched)
    if kind is PersistentScheduler:
        return _kernel.RULE_PERSISTENT, 1, None
    if kind is RoundRobinScheduler:
        return _kernel.RULE_ROUND_ROBIN, int(_as_action(sched.initial)), None
    if kind is FullDuplexScheduler:
        return _kernel.RULE_FULL_DUPLEX, 3, None
    if kind is OptimalScheduler:
        return _kernel.RULE_TABLE, 1, sched.policy_table_
    return None


def run(config, scheduler=None, record_cycles=None, keep_rep=None, engine="auto"):
    """Simulate ``config.replications`` independent closed loops for ``config.K`` slots.

    ``scheduler`` is a kind name or a fitted scheduler (required for the
    optimal policy). Cycle statistics are collected for the persistent
    policy unless ``record_cycles`` says otherwise. ``keep_rep`` stores
    the per-slot actions and costs of that replication in ``result.per_slot``.

    ``engine="compiled"`` runs the built-in schedulers through a compiled
    per-replication loop; ``"numpy"`` advances all replications together
    and accepts any object with ``decide_batch``. ``"auto"`` picks the
    compiled loop whenever it applies. Both consume identical draws.
    """
    sched = _resolve_scheduler(config, scheduler)
    if record_cycles is None:
        record_cycles = sched.name == "persistent"
    if keep_rep is not None and not 0 <= keep_rep < config.replications:
        raise ValueError(f"keep_rep must lie in [0, {config.replications}), got {keep_rep}")
    rule = _rule_of(sched)
    if engine == "auto":
        engine = "compiled" if rule is not None else "numpy"
    if engine == "compiled":
        if rule is None:
            raise ValueError(f"no compiled rule for {type(sched).__name__}; use engine='numpy'")
        out = _run_compiled(config, rule, record_cycles, keep_rep)
    elif engine == "numpy":
        out = _run_numpy(config, sched, record_cycles, keep_rep)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return _assemble(config, sched.name, record_cycles, keep_rep, **out)


def _assemble(config, name, record_cycles, keep_rep, trace, totals, counts, cyc, checkpoints, kept):
    N, K = config.replications, config.K
    freq = counts.sum(axis=0) / (N * K)
    action_freq = {a.name.lower(): float(freq[a]) for a in Action}
    cycles = None
    if record_cycles:
        S, L, n = cyc.sum(axis=0)
        cycles = CycleStats(
            mean_S=float(S / max(n, 1)),
            mean_L=float(L / max(n, 1)),
            ratio=float(S / L) if L else float("nan"),
            n_cycles=int(n),
        )
    checkpoints = checkpoints.mean(axis=0)
    diverged = bool(divergence_from_checkpoints(checkpoints, config.growth)) if len(checkpoints) >= 2 else None
    meta = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "K": K,
        "replications": N,
        "version": __version__,
        "config": config.to_dict(),
    }
    per_slot = {"actions": kept[0], "costs": kept[1]} if keep_rep is not None else None
    return SimResult(name, _trace_slots(K), trace, totals / K, action_freq, cycles,
                     diverged, checkpoints, meta, per_slot)


def _plant_arrays(p):
    gains = np.einsum("ij,ejk->eik", p.K, p.closed_loop_powers(p.v - 1))  # (v, m, n)
    return gains, np.linalg.cholesky(p.R)


def _run_compiled(config, rule, record_cycles, keep_rep):
    code, first, table = rule
    p = config.plant
    N, K, v, n = config.replications, config.K, p.v, p.n
    gains, chol = _plant_arrays(p)
    ch, cum_s, cum_c = _channel_arrays(config.channel)
    if table is not None:
        flat = np.ascontiguousarray(table.dense()).ravel()
        bound = table.space.bound
        bs, bc = table.space._dims()
    else:
        flat, bound, (bs, bc) = np.zeros(1, dtype=np.int8), 1, (1, 1)
    slots = _trace_slots(K)
    n_check = K // config.window
    trace = np.empty((N, len(slots)))
    checkpoints = np.empty((N, n_check))
    totals = np.empty(N)
    counts = np.zeros((N, 4), dtype=np.int64)
    cyc = np.zeros((N, 3))
    kept = (np.empty(K, dtype=np.int8), np.empty(K)) if keep_rep is not None else None
    none_a, none_c = np.empty(0, dtype=np.int8), np.empty(0)
    init = SchedState.initial(v)
    A, B, Q = (np.ascontiguousarray(a) for a in (p.A, p.B, p.Q))
    omega, xi = np.ascontiguousarray(ch.omega), np.ascontiguousarray(ch.xi)
    for r in range(N):
        g = replication_rng(config.seed, r)
        hs, hc = _initial_channel(ch, g.random(2)[None, :])
        x = np.array(config.x0, dtype=float)
        xh = x.copy()
        buf = np.zeros((v, p.m))
        taus = np.array(init.taus, dtype=np.int64)
        phis = np.array(init.phis, dtype=np.int64)
        fs = np.zeros(3)
        ist = np.zeros(7, dtype=np.int64)
        ist[_kernel.I_HS], ist[_kernel.I_HC], ist[_kernel.I_PREV] = hs[0], hc[0], Action.SENSE
        ka, kc = kept if r == keep_rep else (none_a, none_c)
        for k0 in range(0, K, CHUNK):
            z = g.standard_normal((CHUNK, n))
            u = g.random((CHUNK, 4))
            c = min(CHUNK, K - k0)
            bad = _kernel.run_chunk(
                k0, z[:c], u[:c], fs, ist, counts[r], x, xh, buf, taus, phis,
                A, B, gains, chol, Q, omega, xi, cum_s, cum_c,
                code, first, flat, bound, bs, bc, record_cycles,
                slots, trace[r], config.window, checkpoints[r], ka, kc,
            )
            if bad >= 0:
                raise RuntimeError(f"policy lookup fell outside the table at slot {bad}")
        totals[r] = fs[_kernel.F_TOTAL]
        cyc[r] = fs[_kernel.F_CYC_S], ist[_kernel.I_CYC_L], ist[_kernel.I_N_CYC]
    return dict(trace=trace, totals=totals, counts=counts, cyc=cyc, checkpoints=checkpoints, kept=kept)


def _run_numpy(config, sched, record_cycles, keep_rep):
    p = config.plant
    N, K, v, n = config.replications, config.K, p.v, p.n
    A_T, B_T, Q = p.A.T, p.B.T, p.Q
    gains, chol = _plant_arrays(p)
    ch, cum_s, cum_c = _channel_arrays(config.channel)
    streams = _Streams(config.seed, N, n)
    hs, hc = _initial_channel(ch, streams.initial_uniforms())

    x = np.tile(np.asarray(config.x0, dtype=float), (N, 1))
    x_hat = x.copy()
    buf = np.zeros((v, N, p.m))
    init = SchedState.initial(v)
    taus = np.tile(np.array(init.taus, dtype=np.int64), (N, 1))
    phis = np.tile(np.array(init.phis, dtype=np.int64), (N, 1))

    slots = _trace_slots(K)
    trace = np.empty((N, len(slots)))
    checkpoints = np.empty((N, K // config.window))
    ti = 0
    total = np.zeros(N)
    counts = np.zeros((N, 4), dtype=np.int64)
    rows = np.arange(N)
    kept = (np.empty(K, dtype=np.int8), np.empty(K)) if keep_rep is not None else None
    cyc_S = np.zeros(N)
    cyc_L = np.zeros(N, dtype=np.int64)
    cur_S = np.zeros(N)
    cur_L = np.zeros(N, dtype=np.int64)
    n_cyc = np.zeros(N, dtype=np.int64)
    prev = np.full(N, Action.SENSE)

    for k in range(K):
        act = np.broadcast_to(np.asarray(sched.decide_batch(taus, phis, hs, hc, k)), (N,))
        if np.any(act == 0):
            raise RuntimeError(f"policy lookup fell outside the table at slot {k}")
        z, u = streams.next()
        cost = np.einsum("ri,ij,rj->r", x, Q, x)
        total += cost
        counts[rows, act] += 1
        if kept is not None:
            kept[0][k] = act[keep_rep]
            kept[1][k] = cost[keep_rep]
        if record_cycles:
            # a control-to-sense switch closes a cycle
            closes = (prev == Action.CONTROL) & (act == Action.SENSE)
            cyc_S += np.where(closes, cur_S, 0.0)
            cyc_L += np.where(closes, cur_L, 0)
            n_cyc += closes
            cur_S = np.where(closes, 0.0, cur_S) + cost
            cur_L = np.where(closes, 0, cur_L) + 1
            prev = act

        sense_ok = (act != Action.CONTROL) & (u[:, 0] >= ch.omega[hs])
        control_ok = (act != Action.SENSE) & (u[:, 1] >= ch.xi[hc])
        shifted = np.concatenate([buf[1:], np.zeros_like(buf[:1])], axis=0)
        if control_ok.any():
            fresh = np.einsum("eik,rk->eri", gains, x_hat)
            buf = np.where(control_ok[None, :, None], fresh, shifted)
        else:
            buf = shifted
        drive = buf[0] @ B_T
        source = np.where(sense_ok[:, None], x, x_hat)
        x_hat = source @ A_T + drive
        x = x @ A_T + drive + z @ chol.T
        taus, phis = advance_indicators(taus, phis, sense_ok, control_ok)
        hs = _next_state(cum_s, hs, u[:, 2])
        hc = _next_state(cum_c, hc, u[:, 3])

        done = k + 1
        if done == slots[ti]:
            trace[:, ti] = total / done
            ti += 1
        if done % config.window == 0:
            checkpoints[:, done // config.window - 1] = total / done

    cyc = np.stack([cyc_S, cyc_L, n_cyc], axis=1).astype(float)
    return dict(trace=trace, totals=total, counts=counts, cyc=cyc, checkpoints=checkpoints, kept=kept)


def cycle_stats(actions, costs):
    """Renewal-cycle statistics of a single persistent-policy run.

    A cycle is a maximal block of sensing slots followed by a maximal
    block of control slots. Returns ``CycleStats`` over complete cycles.
    """
    actions = np.asarray(actions)
    costs = np.asarray(costs, dtype=float)
    if actions.shape != costs.shape or actions.ndim != 1:
        raise ValueError("actions and costs must be 1-D arrays of equal length")
    if np.any(costs < 0):
        raise ValueError("costs must be nonnegative")
    starts = np.flatnonzero((actions[1:] == Action.SENSE) & (actions[:-1] == Action.CONTROL)) + 1
    first = 0 if actions[0] == Action.SENSE else None
    if first is not None:
        starts = np.concatenate([[0], starts])
    if len(starts) - 1 < MIN_CYCLES:
        raise ValueError(f"only {max(len(starts) - 1, 0)} complete cycles; need at least {MIN_CYCLES}")
    csum = np.concatenate([[0.0], np.cumsum(costs)])
    S = csum[starts[1:]] - csum[starts[:-1]]
    L = np.diff(starts)
    return CycleStats(float(S.mean()), float(L.mean()), float(S.sum() / L.sum()), len(L))
