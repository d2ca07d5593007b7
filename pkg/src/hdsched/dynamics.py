"""Closed-loop per-slot dynamics of the half-duplex loop.

One slot ``k`` proceeds as:

1. the actuator buffer is reset with the command sequence computed from
   ``x_hat[k]`` if a downlink transmission succeeded, otherwise shifted
   left with zero fill;
2. the first buffered command is applied;
3. the plant and the controller-side estimate advance one slot;
4. the quality indicators (tau, eta and the v-step tau^i / phi^i) advance.

``step`` accepts a single state vector or a batch of vectors of shape
``(N, n)`` that share one transmission history.
"""

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np


class Action(enum.IntEnum):
    SENSE = 1
    CONTROL = 2
    BOTH = 3  # full-duplex baseline only


@dataclass(frozen=True)
class SchedState:
    """Indicator tuple seen by the scheduler.

    ``taus`` is ``(tau^0, ..., tau^(v-1))`` and ``phis`` is
    ``(phi^0, ..., phi^(v-1))``; ``channel`` is ``(h_s, h_c)`` for
    Markov channels and ``None`` otherwise.
    """

    taus: Tuple[int, ...]
    phis: Tuple[int, ...]
    channel: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        phis = tuple(int(f) for f in self.phis)
        if len(taus) != len(phis) or not taus:
            raise ValueError("taus and phis must have the same non-zero length")
        if min(taus) < 1:
            raise ValueError(f"tau values must be >= 1, got {taus}")
        if any(f < t for t, f in zip(taus, phis)):
            raise ValueError(f"phi^i must be >= tau^i, got taus={taus} phis={phis}")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "phis", phis)
        if self.channel is not None:
            object.__setattr__(self, "channel", tuple(int(h) for h in self.channel))

    @property
    def v(self):
        return len(self.taus)

    def as_row(self):
        row = self.taus + self.phis
        return row + self.channel if self.channel is not None else row

    @classmethod
    def initial(cls, v, channel=None):
        """Initial indicators: ``(tau^0, phi^0) = (2, 2)``, older entries ``(1, 2)``."""
        return cls((2,) + (1,) * (v - 1), (2,) * v, channel)


def advance_indicators(taus, phis, sense_ok, control_ok):
    """Next ``(taus, phis)`` arrays; the last axis indexes ``i = 0..v-1``.

    Works elementwise over leading batch axes. Both flags may be true in
    the same slot (full-duplex).
    """
    taus = np.asarray(taus)
    phis = np.asarray(phis)
    sense_ok = np.asarray(sense_ok)[..., None]
    control_ok = np.asarray(control_ok)[..., None]
    shifted_t = np.concatenate([taus[..., :1], taus[..., :-1]], axis=-1)
    shifted_f = np.concatenate([taus[..., :1] + 1, phis[..., :-1]], axis=-1)
    new_t = np.where(control_ok, shifted_t, taus).copy()
    new_f = np.where(control_ok, shifted_f, phis).copy()
    new_t[..., 0] = np.where(sense_ok[..., 0], 1, taus[..., 0] + 1)
    new_f[..., 0] = np.where(control_ok[..., 0], taus[..., 0] + 1, phis[..., 0] + 1)
    return new_t, new_f


def sched_transition(s, action, ok):
    """Deterministic successor of a scheduler state given the outcome.

    ``ok`` is the success flag of the scheduled link. The channel part is
    carried over unchanged; channel dynamics are handled by the caller.
    """
    action = Action(action)
    if action == Action.BOTH:
        raise ValueError("sched_transition covers half-duplex actions only")
    sense_ok = action == Action.SENSE and ok
    control_ok = action == Action.CONTROL and ok
    t, f = advance_indicators(s.taus, s.phis, sense_ok, control_ok)
    return SchedState(tuple(t.tolist()), tuple(f.tolist()), s.channel)


@dataclass
class LoopState:
    x: np.ndarray
    x_hat: np.ndarray
    buffer: np.ndarray  # (v, ..., m)
    sched: SchedState
    eta: int = 1
    tau: int = 2
    channel_state: Optional[Tuple[int, int]] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, p, x0, channel_state=None):
        x0 = np.asarray(x0, dtype=float)
        buf = np.zeros((p.v,) + x0.shape[:-1] + (p.m,))
        sched = SchedState.initial(p.v, channel_state)
        return cls(x0.copy(), x0.copy(), buf, sched, eta=1, tau=sched.taus[0], channel_state=channel_state)


def command_sequence(p, x_hat):
    """``[K x_hat, K M x_hat, ..., K M^(v-1) x_hat]`` stacked on axis 0."""
    Mp = p.closed_loop_powers(p.v - 1)
    gains = np.einsum("ij,ejk->eik", p.K, Mp)  # (v, m, n)
    return np.einsum("eik,...k->e...i", gains, x_hat)


def step(loop, p, action, up_ok, down_ok, w):
    """Advance the loop by one slot and return the new ``LoopState``."""
    action = Action(action)
    sense_ok = bool(up_ok) and action in (Action.SENSE, Action.BOTH)
    control_ok = bool(down_ok) and action in (Action.CONTROL, Action.BOTH)
    if control_ok:
        buf = command_sequence(p, loop.x_hat)
    else:
        buf = np.concatenate([loop.buffer[1:], np.zeros_like(loop.buffer[:1])], axis=0)
    u = buf[0]
    drive = u @ p.B.T
    x_next = loop.x @ p.A.T + drive + w
    if sense_ok:
        x_hat_next = loop.x @ p.A.T + drive
    else:
        x_hat_next = loop.x_hat @ p.A.T + drive
    t, f = advance_indicators(loop.sched.taus, loop.sched.phis, sense_ok, control_ok)
    sched = SchedState(tuple(t.tolist()), tuple(f.tolist()), loop.sched.channel)
    return replace(
        loop,
        x=x_next,
        x_hat=x_hat_next,
        buffer=buf,
        sched=sched,
        eta=1 if control_ok else loop.eta + 1,
        tau=1 if sense_ok else loop.tau + 1,
    )


def _check_history(etas, taus):
    etas = [int(e) for e in etas]
    taus = [int(t) for t in taus]
    v = len(etas)
    if len(taus) != v:
        raise ValueError("need tau^1..tau^v, one per eta^0..eta^(v-1)")
    if min(etas) < 1 or min(taus) < 1:
        raise ValueError("eta and tau values must be >= 1")
    for j in range(1, v):
        # the newest sensing before t^j either falls strictly inside the
        # gap to t^(j+1) or coincides with the one before t^(j+1)
        if not (taus[j - 1] < etas[j] or taus[j - 1] == etas[j] + taus[j]):
            raise ValueError(
                f"inconsistent history at j={j}: tau^{j}={taus[j - 1]}, "
                f"eta^{j}={etas[j]}, tau^{j + 1}={taus[j]}"
            )
    return etas, taus


def history_length(etas, taus):
    """Number of past noise samples ``x[k]`` depends on."""
    return sum(etas) + taus[-1]


def state_params(etas, taus):
    """Scheduler parameters ``(tau^1..tau^(v-1), phi^0..phi^(v-1))`` of a history."""
    etas, taus = _check_history(etas, taus)
    phis = tuple(e + t for e, t in zip(etas, taus))
    return tuple(taus[:-1]), phis


def vstep_explicit_state(p, etas, taus, noise):
    """Plant state as an explicit weighted sum of past disturbances.

    ``etas`` are the gaps ``eta^0..eta^(v-1)`` between successful downlink
    slots, ``taus`` the estimation-quality values ``tau^1..tau^v`` at
    those slots, and ``noise[l - 1]`` holds ``w[k - l]`` (leading axis is
    the lag, trailing axis the state dimension). Valid for plants with
    ``(A + B K)^v = 0``.
    """
    etas, taus = _check_history(etas, taus)
    v = len(etas)
    noise = np.asarray(noise, dtype=float)
    need = history_length(etas, taus)
    if noise.shape[0] < need:
        raise ValueError(f"need at least {need} noise samples, got {noise.shape[0]}")
    top = max(e + t for e, t in zip(etas, taus))
    Ap = np.empty((top + 1, p.n, p.n))
    Ap[0] = np.eye(p.n)
    for i in range(1, top + 1):
        Ap[i] = Ap[i - 1] @ p.A

    def segment(offset, lo, hi):
        # sum_{i=lo}^{hi} A^(i-1) w[k - offset - i]
        idx = np.arange(lo, hi + 1)
        return np.einsum("ijk,i...k->...j", Ap[idx - 1], noise[offset + idx - 1])

    x = segment(0, 1, etas[0] + taus[0])
    offset = etas[0]
    for j in range(1, v):
        if etas[j] > taus[j - 1]:
            seg = segment(offset, taus[j - 1] + 1, etas[j] + taus[j])
            Mj = np.linalg.matrix_power(p.closed_loop, offset)
            x = x + seg @ Mj.T
        offset += etas[j]
    return x


def forced_schedule(etas, taus, lead=3):
    """Slot-by-slot ``(action, success)`` list realising a history.

    Successful downlink slots sit at ``t^j``, successful uplink slots at
    ``t^j - tau^j``; every other slot is a failed uplink attempt. The list
    covers slots ``0..k-1`` where slot ``k`` is the evaluation slot, and
    starts ``lead`` idle slots before the earliest event.
    """
    etas, taus = _check_history(etas, taus)
    k = history_length(etas, taus) + lead
    events = {}
    t = k
    for j, e in enumerate(etas):
        t -= e
        events[t] = (Action.CONTROL, True)
        s = t - taus[j]
        if s in events and events[s][0] == Action.CONTROL:
            raise ValueError("uplink and downlink success in the same slot")
        events.setdefault(s, (Action.SENSE, True))
    return [events.get(slot, (Action.SENSE, False)) for slot in range(k)]
