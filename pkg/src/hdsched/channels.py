"""Packet-loss models for the uplink (sensor -> controller) and downlink
(controller -> actuator).

Markov transition matrices are stored row-stochastic: ``D[i, j]`` is the
probability of moving from state ``i`` to state ``j``. Channel-state
indices are zero-based.
"""

from dataclasses import dataclass

import numpy as np

UP = "up"
DOWN = "down"
ROW_SUM_TOL = 1e-9


def _check_link(link):
    if link not in (UP, DOWN):
        raise ValueError(f"link must be {UP!r} or {DOWN!r}, got {link!r}")


@dataclass(frozen=True)
class StaticChannel:
    """Time-invariant packet-error probabilities ``p_s`` (uplink) and ``p_c`` (downlink)."""

    p_s: float
    p_c: float

    def __post_init__(self):
        for name in ("p_s", "p_c"):
            val = float(getattr(self, name))
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
            object.__setattr__(self, name, val)

    n_states = (1, 1)

    def loss_prob(self, link, state_index=0):
        _check_link(link)
        return self.p_s if link == UP else self.p_c

    def to_dict(self):
        return {"kind": "static", "ps": self.p_s, "pc": self.p_c}

    def as_markov(self):
        """The equivalent single-state Markov channel."""
        return MarkovChannel([self.p_s], [self.p_c], [[1.0]], [[1.0]])


class MarkovChannel:
    """Finite-state Markov (Gilbert-Elliott style) channel for both links.

    Parameters
    ----------
    omega : per-state uplink loss probabilities.
    xi : per-state downlink loss probabilities.
    D_s, D_c : row-stochastic transition matrices (row = current state).
    """

    def __init__(self, omega, xi, D_s, D_c):
        self.omega = np.array(omega, dtype=float).ravel()
        self.xi = np.array(xi, dtype=float).ravel()
        self.D_s = np.array(D_s, dtype=float)
        self.D_c = np.array(D_c, dtype=float)
        for name, probs, D in (("omega", self.omega, self.D_s), ("xi", self.xi, self.D_c)):
            if probs.size == 0 or np.any(probs < 0.0) or np.any(probs > 1.0):
                raise ValueError(f"{name} entries must lie in [0, 1]")
            b = probs.size
            if D.shape != (b, b):
                raise ValueError(f"transition matrix for {name} must be {b}x{b}, got {D.shape}")
            if np.any(D < 0.0) or not np.allclose(D.sum(axis=1), 1.0, atol=ROW_SUM_TOL, rtol=0):
                raise ValueError(f"transition matrix for {name} must be row-stochastic")
        for arr in (self.omega, self.xi, self.D_s, self.D_c):
            arr.setflags(write=False)

    @property
    def n_states(self):
        return (self.omega.size, self.xi.size)

    def __eq__(self, other):
        return isinstance(other, MarkovChannel) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("omega", "xi", "D_s", "D_c")
        )

    def __repr__(self):
        return (
            f"MarkovChannel(omega={self.omega.tolist()}, xi={self.xi.tolist()}, "
            f"D_s={self.D_s.tolist()}, D_c={self.D_c.tolist()})"
        )

    def _link(self, link):
        _check_link(link)
        return (self.omega, self.D_s) if link == UP else (self.xi, self.D_c)

    def loss_prob(self, link, state_index):
        probs, _ = self._link(link)
        if not 0 <= state_index < probs.size:
            raise IndexError(f"{link} channel state {state_index} out of range")
        return float(probs[state_index])

    def transition_row(self, link, state_index):
        _, D = self._link(link)
        if not 0 <= state_index < D.shape[0]:
            raise IndexError(f"{link} channel state {state_index} out of range")
        return D[state_index]

    def to_dict(self):
        return {
            "kind": "markov",
            "omega": self.omega.tolist(),
            "xi": self.xi.tolist(),
            "Ds": self.D_s.tolist(),
            "Dc": self.D_c.tolist(),
        }

    def stationary(self, link):
        """Stationary distribution of one link's chain."""
        _, D = self._link(link)
        b = D.shape[0]
        # solve pi (D - I) = 0 with sum(pi) = 1
        lhs = np.vstack([(D - np.eye(b)).T, np.ones(b)])
        rhs = np.zeros(b + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def sample_outcome(ch, link, state_index, rng):
    """Draw a transmission outcome; returns ``True`` on success."""
    return bool(rng.random() >= ch.loss_prob(link, state_index))


def step_channel_state(ch, link, state_index, rng):
    row = ch.transition_row(link, state_index)
    return int(min(np.searchsorted(np.cumsum(row), rng.random(), side="right"), row.size - 1))


def joint_transition_prob(ch, h, h_next):
    """``P(h' | h)`` for the pair of independent link chains."""
    (hs, hc), (hs2, hc2) = h, h_next
    return float(ch.transition_row(UP, hs)[hs2] * ch.transition_row(DOWN, hc)[hc2])


def channel_from_dict(d):
    kind = d.get("kind", "static")
    if kind == "static":
        return StaticChannel(d["ps"], d["pc"])
    if kind == "markov":
        return MarkovChannel(d["omega"], d["xi"], d["Ds"], d["Dc"])
    raise ValueError(f"unknown channel kind {kind!r}")
