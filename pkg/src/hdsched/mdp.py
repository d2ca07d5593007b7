"""Truncated average-cost MDPs for the scheduling problem and their solver.

A state is the indicator tuple ``(tau^0..tau^(v-1), phi^0..phi^(v-1))``,
extended by the channel-state pair ``(h_s, h_c)`` for Markov channels.
Indicators are capped at ``bound``: a transition that would push an
indicator past the cap lands on the capped value instead, so every row
of the kernel stays stochastic.
"""

import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .channels import MarkovChannel, StaticChannel
from .dynamics import Action
from .plant import stage_costs

ACTIONS = (Action.SENSE, Action.CONTROL)
TIE_RTOL = 1e-12


class TruncatedSpace:
    """Finite state space with ``1 <= tau^i <= bound``, ``2 <= phi^i <= bound``,
    ``phi^i >= tau^i`` and, for ``v = 1`` only, ``phi != tau + 1``.
    """

    def __init__(self, bound=20, v=1, channel_dims=None):
        if bound < 3:
            raise ValueError(f"bound must be >= 3, got {bound}")
        self.bound = int(bound)
        self.v = int(v)
        self.channel_dims = tuple(channel_dims) if channel_dims is not None else None

        L = self.bound
        pairs = [(t, f) for t in range(1, L + 1) for f in range(max(2, t), L + 1)]
        if self.v == 1:
            pairs = [(t, f) for t, f in pairs if f != t + 1]
        pairs = np.array(pairs, dtype=np.int64)
        grids = np.meshgrid(*[np.arange(len(pairs))] * self.v, indexing="ij")
        sel = np.stack([g.ravel() for g in grids], axis=1)  # (N, v) pair indices
        self.taus = pairs[sel, 0]
        self.phis = pairs[sel, 1]
        n_ind = len(sel)
        if self.channel_dims is not None:
            bs, bc = self.channel_dims
            hs, hc = np.meshgrid(np.arange(bs), np.arange(bc), indexing="ij")
            reps = bs * bc
            self.taus = np.repeat(self.taus, reps, axis=0)
            self.phis = np.repeat(self.phis, reps, axis=0)
            self.hs = np.tile(hs.ravel(), n_ind)
            self.hc = np.tile(hc.ravel(), n_ind)
        else:
            self.hs = np.zeros(n_ind, dtype=np.int64)
            self.hc = np.zeros(n_ind, dtype=np.int64)
        codes = self.encode(self.taus, self.phis, self.hs, self.hc)
        order = np.argsort(codes, kind="stable")
        self.taus, self.phis = self.taus[order], self.phis[order]
        self.hs, self.hc = self.hs[order], self.hc[order]
        self._codes = codes[order]

    def __len__(self):
        return len(self._codes)

    @property
    def fading(self):
        return self.channel_dims is not None

    def _dims(self):
        bs, bc = self.channel_dims if self.fading else (1, 1)
        return bs, bc

    def encode(self, taus, phis, hs, hc):
        L1 = self.bound + 1
        bs, bc = self._dims()
        code = np.zeros(np.shape(taus)[0], dtype=np.int64)
        for col in range(self.v):
            code = code * L1 + taus[:, col]
        for col in range(self.v):
            code = code * L1 + phis[:, col]
        return (code * bs + hs) * bc + hc

    def clamp(self, taus, phis):
        """Cap indicators at ``bound``; for ``v = 1`` a capped state with
        ``phi = tau + 1`` (outside the space) moves to ``(phi, phi)``.
        """
        taus = np.minimum(taus, self.bound)
        phis = np.minimum(phis, self.bound)
        if self.v == 1:
            taus = np.where(phis == taus + 1, phis, taus)
        return taus, phis

    def index(self, taus, phis, hs=None, hc=None, clamp=True):
        """State ids of the given rows; ``-1`` for rows outside the space."""
        taus = np.atleast_2d(np.asarray(taus, dtype=np.int64))
        phis = np.atleast_2d(np.asarray(phis, dtype=np.int64))
        if clamp:
            taus, phis = self.clamp(taus, phis)
        n = taus.shape[0]
        hs = np.zeros(n, dtype=np.int64) if hs is None else np.broadcast_to(np.asarray(hs, dtype=np.int64), (n,))
        hc = np.zeros(n, dtype=np.int64) if hc is None else np.broadcast_to(np.asarray(hc, dtype=np.int64), (n,))
        ok = np.all(taus >= 1, axis=1) & np.all(phis >= 2, axis=1)
        code = self.encode(taus, phis, hs, hc)
        pos = np.searchsorted(self._codes, code)
        pos = np.minimum(pos, len(self._codes) - 1)
        found = ok & (self._codes[pos] == code)
        return np.where(found, pos, -1)

    def rows(self):
        """States as an integer matrix with columns ``taus, phis[, hs, hc]``."""
        cols = [self.taus, self.phis]
        if self.fading:
            cols += [self.hs[:, None], self.hc[:, None]]
        return np.hstack(cols)

    def split_rows(self, X):
        X = np.asarray(X, dtype=np.int64)
        width = 2 * self.v + (2 if self.fading else 0)
        if X.ndim != 2 or X.shape[1] != width:
            raise ValueError(f"expected rows of width {width}, got shape {X.shape}")
        taus, phis = X[:, : self.v], X[:, self.v : 2 * self.v]
        if self.fading:
            return taus, phis, X[:, -2], X[:, -1]
        return taus, phis, None, None

    def describe(self):
        return {"bound": self.bound, "v": self.v, "channel_dims": self.channel_dims, "n_states": len(self)}


@dataclass
class Kernel:
    """Successor ids, probabilities and stage costs.

    ``next[a]`` and ``prob[a]`` have shape ``(N, J)`` for action index
    ``a`` (0 = sense, 1 = control); ``cost`` has shape ``(N,)``.
    """

    space: TruncatedSpace
    next: np.ndarray
    prob: np.ndarray
    cost: np.ndarray
    meta: dict = field(default_factory=dict)

    def successors(self, state_id, action):
        a = ACTIONS.index(Action(action))
        out = {}
        for j, p in zip(self.next[a, state_id], self.prob[a, state_id]):
            if p > 0:
                out[int(j)] = out.get(int(j), 0.0) + float(p)
        return out


def _fail_rows(taus, phis):
    return taus.copy() + np.eye(1, taus.shape[1], 0, dtype=np.int64), phis + np.eye(1, phis.shape[1], 0, dtype=np.int64)


def build_kernel(space, plant, channel):
    """Transition kernel and stage costs of the truncated MDP."""
    if plant.v != space.v:
        raise ValueError(f"plant horizon v={plant.v} does not match space v={space.v}")
    if isinstance(channel, StaticChannel):
        if space.fading:
            raise ValueError("static channel given for a fading state space")
        ch = channel.as_markov()
    elif isinstance(channel, MarkovChannel):
        if space.channel_dims != channel.n_states:
            raise ValueError(f"space channel dims {space.channel_dims} != channel {channel.n_states}")
        ch = channel
    else:
        raise TypeError(f"unsupported channel {channel!r}")

    taus, phis, hs, hc = space.taus, space.phis, space.hs, space.hc
    N = len(space)

    # outcome successors, written out per action
    fail_t, fail_f = _fail_rows(taus, phis)
    sense_ok_t, sense_ok_f = fail_t.copy(), fail_f
    sense_ok_t[:, 0] = 1
    ctrl_ok_t = np.concatenate([taus[:, :1] + 1, taus[:, :-1]], axis=1)
    ctrl_ok_f = np.concatenate([taus[:, :1] + 1, phis[:, :-1]], axis=1)

    bs, bc = ch.n_states
    h_next = [(a, b) for a in range(bs) for b in range(bc)]
    J = 2 * len(h_next)
    nxt = np.empty((2, N, J), dtype=np.int64)
    prob = np.empty((2, N, J))
    loss = {0: ch.omega[hs], 1: ch.xi[hc]}
    ok_rows = {0: (sense_ok_t, sense_ok_f), 1: (ctrl_ok_t, ctrl_ok_f)}
    for a in (0, 1):
        for j, (hs2, hc2) in enumerate(h_next):
            p_h = ch.D_s[hs, hs2] * ch.D_c[hc, hc2]
            hs_arr = np.full(N, hs2) if space.fading else None
            hc_arr = np.full(N, hc2) if space.fading else None
            nxt[a, :, 2 * j] = space.index(fail_t, fail_f, hs_arr, hc_arr)
            prob[a, :, 2 * j] = p_h * loss[a]
            nxt[a, :, 2 * j + 1] = space.index(*ok_rows[a], hs_arr, hc_arr)
            prob[a, :, 2 * j + 1] = p_h * (1.0 - loss[a])
    if np.any(nxt < 0):
        raise RuntimeError("kernel successor fell outside the truncated space")

    cost = stage_costs(plant, taus[:, 1:], phis)
    return Kernel(space, nxt, prob, cost, meta={"space": space.describe()})


class PolicyTable:
    """Deterministic stationary action per state of a truncated space."""

    def __init__(self, space, actions, meta=None):
        actions = np.asarray(actions, dtype=np.int8)
        if actions.shape != (len(space),):
            raise ValueError(f"need one action per state ({len(space)}), got {actions.shape}")
        if not np.all(np.isin(actions, (Action.SENSE, Action.CONTROL))):
            raise ValueError("actions must be 1 (sense) or 2 (control)")
        self.space = space
        self.actions = actions
        self.meta = dict(meta or {})
        self._dense = None

    def lookup(self, taus, phis, hs=None, hc=None):
        ids = self.space.index(taus, phis, hs, hc, clamp=True)
        if np.any(ids < 0):
            raise KeyError("state outside the truncated space after clamping")
        return self.actions[ids]

    def dense(self):
        """Action array indexed directly by clamped indicator values."""
        if self._dense is None:
            sp = self.space
            bs, bc = sp._dims()
            box = np.zeros((sp.bound + 1,) * (2 * sp.v) + (bs, bc), dtype=np.int8)
            idx = tuple(sp.taus.T) + tuple(sp.phis.T) + (sp.hs, sp.hc)
            box[idx] = self.actions
            self._dense = box
        return self._dense

    def to_csv(self, path_or_buf=None):
        sp = self.space
        buf = io.StringIO()
        buf.write("# hdsched policy table\n")
        buf.write("# " + json.dumps({"space": sp.describe(), **self.meta}, sort_keys=True, default=str) + "\n")
        cols = [f"tau{i}" for i in range(sp.v)] + [f"phi{i}" for i in range(sp.v)]
        if sp.fading:
            cols += ["hs", "hc"]
        buf.write(",".join(cols + ["action"]) + "\n")
        rows = np.hstack([sp.rows(), self.actions[:, None].astype(np.int64)])
        np.savetxt(buf, rows, fmt="%d", delimiter=",")
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", encoding="utf-8") as fh:
                fh.write(text)
        return None

    @classmethod
    def from_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        info = json.loads(lines[1][2:])
        sp_info = info.pop("space")
        dims = sp_info.get("channel_dims")
        space = TruncatedSpace(sp_info["bound"], sp_info["v"], tuple(dims) if dims else None)
        data = np.loadtxt(lines[3:], delimiter=",", dtype=np.int64, ndmin=2)
        taus, phis, hs, hc = space.split_rows(data[:, :-1])
        ids = space.index(taus, phis, hs, hc, clamp=False)
        if np.any(ids < 0) or len(np.unique(ids)) != len(space):
            raise ValueError(f"{path}: rows do not cover the truncated space")
        actions = np.empty(len(space), dtype=np.int8)
        actions[ids] = data[:, -1]
        return cls(space, actions, info)

    def render_grid(self, hs=0, hc=0):
        """Text grid for ``v = 1``: ``o`` sense, ``.`` control, ``x`` not a state.

        Rows run over ``phi`` (top = ``bound``), columns over ``tau``.
        """
        sp = self.space
        if sp.v != 1:
            raise ValueError("grid rendering is defined for v = 1")
        L = sp.bound
        lines = []
        for f in range(L, 0, -1):
            cells = []
            for t in range(1, L + 1):
                i = sp.index([[t]], [[f]], hs, hc, clamp=False)[0]
                cells.append("x" if i < 0 else ("o" if self.actions[i] == Action.SENSE else "."))
            lines.append(f"{f:3d} " + " ".join(cells))
        lines.append("    " + " ".join(str(t % 10) for t in range(1, L + 1)))
        return "\n".join(lines)


def _bellman(kernel, h):
    Qs = kernel.cost[None, :] + np.einsum("anj,anj->an", kernel.prob, h[kernel.next])
    # ties go to sensing
    control = Qs[1] < Qs[0] - TIE_RTOL * np.maximum(1.0, np.abs(Qs[0]))
    return np.where(control, Qs[1], Qs[0]), control


def solve_rvi(kernel, tol=1e-8, max_iter=100_000, ref_state=0, track_span=False):
    """Relative value iteration for the average-cost criterion.

    Stops when the span of ``T h - h`` drops below ``tol``. Returns the
    policy table, the gain estimate (optimal average cost) and the bias
    vector normalised to zero at ``ref_state``. Non-convergence is
    reported through ``policy.meta["converged"]`` and a warning. With
    ``track_span`` the per-iteration spans land in ``meta["span_history"]``.
    """
    h = np.zeros(len(kernel.cost))
    span = np.inf
    it = 0
    lo = hi = 0.0
    spans = []
    while it < max_iter:
        it += 1
        Th, _ = _bellman(kernel, h)
        diff = Th - h
        lo, hi = float(diff.min()), float(diff.max())
        span = hi - lo
        if track_span:
            spans.append(span)
        h = Th - Th[ref_state]
        if span < tol:
            break
    converged = span < tol
    if not converged:
        warnings.warn(f"relative value iteration stopped after {it} iterations with span {span:.3e}", RuntimeWarning)
    _, control = _bellman(kernel, h)
    actions = np.where(control, Action.CONTROL, Action.SENSE).astype(np.int8)
    gain = 0.5 * (lo + hi)
    meta = {
        "solver": "rvi",
        "iterations": it,
        "residual": span,
        "converged": bool(converged),
        "tol": tol,
        "gain": gain,
        **kernel.meta,
    }
    if track_span:
        meta["span_history"] = spans
    return PolicyTable(kernel.space, actions, meta), gain, h


def _stationary(P):
    n = P.shape[0]
    M = (P.T - sparse.identity(n, format="csr")).tolil()
    M[0, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[0] = 1.0
    pi = spsolve(M.tocsc(), rhs)
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def _policy_matrix(kernel, actions):
    a = (np.asarray(actions) == Action.CONTROL).astype(np.int64)
    N = len(a)
    rows = np.arange(N)
    nxt = kernel.next[a, rows]
    prob = kernel.prob[a, rows]
    J = nxt.shape[1]
    return sparse.csr_matrix((prob.ravel(), (np.repeat(rows, J), nxt.ravel())), shape=(N, N))


def evaluate_policy(kernel, actions):
    """Long-run average cost of a stationary policy on the truncated chain."""
    pi = _stationary(_policy_matrix(kernel, actions))
    return float(pi @ kernel.cost)


def evaluate_round_robin(kernel, initial=Action.SENSE):
    """Average cost of strict sense/control alternation on the truncated chain.

    Alternation is not stationary in the indicator state, so the chain is
    augmented with the slot parity.
    """
    N = len(kernel.cost)
    first = 0 if Action(initial) == Action.SENSE else 1
    blocks = []
    for parity in (0, 1):
        a = np.full(N, Action.CONTROL if (first + parity) % 2 else Action.SENSE)
        blocks.append(_policy_matrix(kernel, a))
    Z = sparse.csr_matrix((N, N))
    P = sparse.bmat([[Z, blocks[0]], [blocks[1], Z]], format="csr")
    pi = _stationary(P)
    return float(pi @ np.concatenate([kernel.cost, kernel.cost]))


def verify_switching(policy, space=None):
    """Check the two monotonicity properties of a switching-type policy.

    (i) sensing at ``(tau, phi)`` implies sensing at ``(tau + z, phi)``;
    (ii) controlling at ``(tau, phi)`` implies controlling at ``(tau, phi + z)``.
    Checked within each channel-state slice. Returns ``(ok, violations)``
    where each violation is ``(state, offending_state)``.
    """
    space = space or policy.space
    if space.v != 1:
        raise ValueError("switching structure is defined for v = 1")
    violations = []
    L = space.bound
    for hs, hc in {(int(a), int(b)) for a, b in zip(space.hs, space.hc)}:
        grid = np.zeros((L + 2, L + 2), dtype=np.int8)
        sl = (space.hs == hs) & (space.hc == hc)
        grid[space.taus[sl, 0], space.phis[sl, 0]] = policy.actions[sl]
        for t, f in zip(*np.nonzero(grid)):
            if grid[t, f] == Action.SENSE:
                bad = [(t2, f) for t2 in range(t + 1, L + 1) if grid[t2, f] == Action.CONTROL]
            else:
                bad = [(t, f2) for f2 in range(f + 1, L + 1) if grid[t, f2] == Action.SENSE]
            ch = (hs, hc) if space.fading else ()
            violations += [((int(t), int(f)) + ch, (int(a), int(b)) + ch) for a, b in bad]
    return not violations, violations
