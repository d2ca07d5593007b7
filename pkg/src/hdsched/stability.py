"""Closed-form stabilizability checks and an empirical divergence detector."""

from dataclasses import dataclass, field

import numpy as np

from .channels import MarkovChannel, StaticChannel

STABILIZABLE = "Stabilizable"
NOT_STABILIZABLE = "NotStabilizable"
INCONCLUSIVE = "Inconclusive"

DIVERGENCE_WINDOW = 10_000
DIVERGENCE_GROWTH = 1.5
DIVERGENCE_RUN = 5  # consecutive growing window pairs needed


@dataclass
class StabilityReport:
    rho_sq: float
    threshold_optimal: float
    threshold_naive: float
    verdicts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def lines(self):
        out = [
            f"rho^2(A) = {self.rho_sq:.4f}",
            f"threshold (optimal/persistent) = {self.threshold_optimal:.4f}",
            f"threshold (round-robin) = {self.threshold_naive:.4f}",
        ]
        for key, verdict in self.verdicts.items():
            out.append(f"{key}: {verdict}" + (f" ({self.details[key]})" if key in self.details else ""))
        return out

    def __str__(self):
        return "\n".join(self.lines())


def thresholds(plant):
    """``(1/rho^2(A), 1/rho^4(A))``."""
    rho_sq = plant.rho**2
    return 1.0 / rho_sq, 1.0 / rho_sq**2


def _static_verdict(limit, p_s, p_c):
    worst = max(p_s, p_c)
    verdict = STABILIZABLE if worst < limit else NOT_STABILIZABLE
    sign = "<" if worst < limit else ">="
    return verdict, f"{worst:g} {sign} {limit:.4f}"


def check_optimal_static(plant, p_s, p_c):
    """Stabilizable iff ``max(p_s, p_c) < 1/rho^2(A)``."""
    return _static_verdict(thresholds(plant)[0], p_s, p_c)[0]


def check_naive_static(plant, p_s, p_c):
    """Round-robin scheduling: stabilizable iff ``max(p_s, p_c) < 1/rho^4(A)``."""
    return _static_verdict(thresholds(plant)[1], p_s, p_c)[0]


def check_fading(plant, channel):
    """``(necessary_met, sufficient_met)`` for a Markov channel.

    The necessary condition uses the best channel state of each link, the
    sufficient one the worst.
    """
    limit = thresholds(plant)[0]
    necessary = max(channel.omega.min(), channel.xi.min()) < limit
    sufficient = max(channel.omega.max(), channel.xi.max()) < limit
    return bool(necessary), bool(sufficient)


def fading_verdict(plant, channel):
    necessary, sufficient = check_fading(plant, channel)
    if sufficient:
        return STABILIZABLE
    return INCONCLUSIVE if necessary else NOT_STABILIZABLE


def report(plant, channel):
    """Verdicts for every policy family that applies to ``channel``."""
    t_opt, t_naive = thresholds(plant)
    rep = StabilityReport(plant.rho**2, t_opt, t_naive)
    if isinstance(channel, StaticChannel):
        for key, limit in (("optimal", t_opt), ("persistent", t_opt), ("round_robin", t_naive)):
            rep.verdicts[key], rep.details[key] = _static_verdict(limit, channel.p_s, channel.p_c)
    elif isinstance(channel, MarkovChannel):
        necessary, sufficient = check_fading(plant, channel)
        rep.verdicts["optimal"] = fading_verdict(plant, channel)
        rep.details["optimal"] = f"necessary={'met' if necessary else 'violated'}, " \
                                 f"sufficient={'met' if sufficient else 'violated'}"
    else:
        raise TypeError(f"unsupported channel type {type(channel).__name__}")
    return rep


def divergence_from_checkpoints(values, growth_factor=DIVERGENCE_GROWTH, run=DIVERGENCE_RUN):
    """True when ``values[j+1] / values[j] >= growth_factor`` for ``run``
    consecutive pairs."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise ValueError("need at least two checkpoints")
    if not np.all(np.isfinite(values)):
        return True
    with np.errstate(divide="ignore", invalid="ignore"):
        grew = values[1:] >= growth_factor * values[:-1]
    grew &= values[1:] > 0
    streak = 0
    for g in grew:
        streak = streak + 1 if g else 0
        if streak >= run:
            return True
    return False


def detect_divergence(trace, window=DIVERGENCE_WINDOW, growth_factor=DIVERGENCE_GROWTH):
    """Flag an unbounded running-average cost.

    ``trace[k]`` is the running average after ``k + 1`` slots. The trace
    is sampled at the end of each full window and the detector fires when
    the sampled value grows by at least ``growth_factor`` over five
    consecutive window pairs.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 1:
        raise ValueError("trace must be one-dimensional")
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(trace) < 2 * window:
        raise ValueError(f"trace of length {len(trace)} is shorter than two windows ({2 * window})")
    ends = trace[window - 1 :: window]
    return divergence_from_checkpoints(ends, growth_factor)
