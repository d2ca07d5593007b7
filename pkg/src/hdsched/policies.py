"""Transmission schedulers with a scikit-learn style interface.

Every scheduler maps scheduler-state rows to actions. ``fit(plant,
channel)`` prepares it for a given loop (for ``OptimalScheduler`` this
builds and solves the truncated MDP), ``predict(X)`` returns one action
per row, and ``decide(state, slot)`` is the single-state form used by
the simulator. Rows are laid out as ``tau^0..tau^(v-1), phi^0..phi^(v-1)``
followed by ``h_s, h_c`` for Markov channels.
"""

import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .channels import MarkovChannel, StaticChannel
from .dynamics import Action
from .mdp import TruncatedSpace, build_kernel, solve_rvi
from .plant import stage_cost_one_step

TIE_RTOL = 1e-12


def _as_action(a):
    if isinstance(a, str):
        return Action[a.upper()]
    return Action(a)


def _validate_rows(X, width=None):
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if width is not None and X.shape[1] != width:
        raise ValueError(f"expected {width} columns, got {X.shape[1]}")
    return X


class _Scheduler(BaseEstimator):
    name = "base"

    def fit(self, plant, channel=None):
        self.v_ = plant.v
        self.fading_ = isinstance(channel, MarkovChannel)
        return self

    def _width(self):
        return 2 * self.v_ + (2 if self.fading_ else 0)

    def decide(self, state, slot=0):
        taus = np.asarray([state.taus])
        phis = np.asarray([state.phis])
        hs = hc = None
        if state.channel is not None:
            hs, hc = np.asarray([state.channel[0]]), np.asarray([state.channel[1]])
        return Action(int(self.decide_batch(taus, phis, hs, hc, slot)[0]))

    def predict(self, X, slot=0):
        check_is_fitted(self, "v_")
        X = _validate_rows(X, self._width())
        v = self.v_
        hs, hc = (X[:, -2], X[:, -1]) if self.fading_ else (None, None)
        return self.decide_batch(X[:, :v], X[:, v : 2 * v], hs, hc, slot)


class PersistentScheduler(_Scheduler):
    """Sense while ``tau^0 == phi^0``, otherwise control.

    Repeats each link until it succeeds. Only ``tau^0`` and ``phi^0`` are
    consulted, whatever the horizon.
    """

    name = "persistent"

    def decide_batch(self, taus, phis, hs=None, hc=None, slot=0):
        return np.where(taus[:, 0] == phis[:, 0], Action.SENSE, Action.CONTROL).astype(np.int8)


class RoundRobinScheduler(_Scheduler):
    """Strict alternation starting with ``initial`` at slot 0."""

    name = "round_robin"

    def __init__(self, initial="sense"):
        self.initial = initial

    def decide_batch(self, taus, phis, hs=None, hc=None, slot=0):
        first = _as_action(self.initial)
        other = Action.CONTROL if first == Action.SENSE else Action.SENSE
        return np.full(len(taus), first if slot % 2 == 0 else other, dtype=np.int8)


class FullDuplexScheduler(_Scheduler):
    """Baseline controller that uses both links in every slot."""

    name = "full_duplex"

    def decide_batch(self, taus, phis, hs=None, hc=None, slot=0):
        return np.full(len(taus), Action.BOTH, dtype=np.int8)


class OptimalScheduler(_Scheduler):
    """Average-cost optimal scheduler from relative value iteration.

    Parameters
    ----------
    bound : int
        Cap on every indicator in the truncated MDP.
    tol : float
        Span tolerance of the value-difference vector.
    max_iter : int
        Iteration cap of the solver.

    Attributes
    ----------
    policy_table_ : PolicyTable
    gain_ : float
        Optimal average cost of the truncated MDP.
    bias_ : ndarray
    n_iter_, residual_, converged_
    """

    name = "optimal"

    def __init__(self, bound=20, tol=1e-8, max_iter=100_000):
        self.bound = bound
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, plant, channel):
        super().fit(plant, channel)
        dims = channel.n_states if self.fading_ else None
        space = TruncatedSpace(self.bound, plant.v, dims)
        kernel = build_kernel(space, plant, channel)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            table, gain, bias = solve_rvi(kernel, self.tol, self.max_iter)
        table.meta.update(plant=plant.to_dict(), channel=channel.to_dict())
        self.kernel_ = kernel
        self.policy_table_ = table
        self.gain_ = gain
        self.bias_ = bias
        self.n_iter_ = table.meta["iterations"]
        self.residual_ = table.meta["residual"]
        self.converged_ = table.meta["converged"]
        if not self.converged_:
            warnings.warn(
                f"RVI did not converge in {self.n_iter_} iterations (span {self.residual_:.3e})",
                ConvergenceWarning,
            )
        return self

    @classmethod
    def from_table(cls, table):
        """Wrap a solved (e.g. re-loaded) policy table."""
        est = cls(bound=table.space.bound)
        est.v_ = table.space.v
        est.fading_ = table.space.fading
        est.policy_table_ = table
        est.gain_ = table.meta.get("gain")
        est.converged_ = table.meta.get("converged", True)
        return est

    def decide_batch(self, taus, phis, hs=None, hc=None, slot=0):
        check_is_fitted(self, "policy_table_")
        space = self.policy_table_.space
        taus, phis = space.clamp(np.asarray(taus), np.asarray(phis))
        if not space.fading:
            hs = hc = np.zeros(len(taus), dtype=np.int64)
        idx = tuple(taus.T) + tuple(phis.T) + (hs, hc)
        return self.policy_table_.dense()[idx]


SCHEDULERS = {
    "optimal": OptimalScheduler,
    "persistent": PersistentScheduler,
    "round_robin": RoundRobinScheduler,
    "naive": RoundRobinScheduler,
    "full_duplex": FullDuplexScheduler,
    "fd": FullDuplexScheduler,
}


def make_scheduler(kind, **params):
    try:
        cls = SCHEDULERS[kind]
    except KeyError:
        raise ValueError(f"unknown policy kind {kind!r}; choose from {sorted(SCHEDULERS)}") from None
    return cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})


def _loss_probs(channel, state):
    if isinstance(channel, StaticChannel):
        return channel.p_s, channel.p_c
    hs, hc = state.channel if state.channel is not None else (0, 0)
    return channel.loss_prob("up", hs), channel.loss_prob("down", hc)


def myopic_decide(plant, channel, state):
    """Action minimising the expected next-slot cost, with a two-slot
    lookahead when both actions tie (one-step controllable loop).

    For a Markov channel the loss probabilities of the current channel
    state are used.
    """
    if len(state.taus) != 1:
        raise ValueError("myopic rule is defined for v = 1")
    tau, phi = state.taus[0], state.phis[0]
    p_s, p_c = _loss_probs(channel, state)

    def c(f):
        return stage_cost_one_step(plant, f)

    sense = c(phi + 1)
    control = p_c * c(phi + 1) + (1.0 - p_c) * c(tau + 1)
    scale = max(abs(sense), 1.0)
    if control < sense - TIE_RTOL * scale:
        return Action.CONTROL
    if sense < control - TIE_RTOL * scale:
        return Action.SENSE
    # after sensing the next slot controls (its phi exceeds tau = 1)
    sense2 = (1.0 - p_s) * (p_c * c(phi + 2) + (1.0 - p_c) * c(2)) + p_s * c(phi + 2)
    control2 = c(phi + 2)
    return Action.SENSE if sense2 <= control2 else Action.CONTROL


def persistent_schedule_fractions(p_s, p_c):
    """Long-run fractions of sensing and control slots under the persistent rule."""
    for name, val in (("p_s", p_s), ("p_c", p_c)):
        if not 0.0 < val < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {val}")
    denom = (1.0 - p_c) + (1.0 - p_s)
    return (1.0 - p_c) / denom, (1.0 - p_s) / denom
