"""LTI plant, controllability classes and the covariance machinery.

The plant evolves as ``x[k+1] = A x[k] + B u[k] + w[k]`` with
``w ~ N(0, R)``. With a deadbeat-style gain ``K`` the closed-loop matrix
``M = A + B K`` is nilpotent and the plant-state covariance under any
transmission history is a finite combination of

    F(tau)  = sum_{i=1}^{tau} A^(i-1) R (A^T)^(i-1)
    G(x, Y) = M^x Y (M^x)^T

which is what makes the scheduling problem a countable-state MDP.
"""

from dataclasses import dataclass

import numpy as np

from .matlite import (
    as_mat,
    is_symmetric,
    is_zero,
    mat_pow,
    min_eigenvalue_sym,
    power_table,
    spectral_radius,
)

PSD_FLOOR = -1e-8


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Plant matrices, cost weight and predictive-control horizon.

    Parameters
    ----------
    A : (n, n) state transition matrix, required unstable (``rho(A) > 1``).
    B : (n, m) control input matrix.
    K : (m, n) controller gain with ``rho(A + B K) < 1``.
    Q : (n, n) symmetric PSD cost weight.
    R : (n, n) symmetric PD disturbance covariance.
    v : predictive-control horizon (length of the command buffer).
    """

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    v: int = 1

    def __post_init__(self):
        A = as_mat(self.A, "A")
        B = as_mat(self.B, "B")
        K = as_mat(self.K, "K")
        Q = as_mat(self.Q, "Q")
        R = as_mat(self.R, "R")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            # a flat list for a single-input plant means a column
            if B.shape == (1, n):
                B = B.T
            else:
                raise ValueError(f"B must have {n} rows, got {B.shape}")
        m = B.shape[1]
        if K.shape != (m, n):
            raise ValueError(f"K must be {m}x{n}, got {K.shape}")
        for name, W in (("Q", Q), ("R", R)):
            if W.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}, got {W.shape}")
            if not is_symmetric(W):
                raise ValueError(f"{name} must be symmetric")
        if min_eigenvalue_sym(Q) < PSD_FLOOR:
            raise ValueError("Q must be positive semidefinite")
        if min_eigenvalue_sym(R) <= 0.0:
            raise ValueError("R must be positive definite")
        if int(self.v) != self.v or self.v < 1:
            raise ValueError(f"v must be a positive integer, got {self.v}")
        rho_a = spectral_radius(A)
        if rho_a <= 1.0:
            raise ValueError(f"plant must be unstable, got rho(A)={rho_a:.6g}")
        M = A + B @ K
        rho_m = spectral_radius(M)
        if rho_m >= 1.0:
            raise ValueError(f"rho(A+BK) must be < 1, got {rho_m:.6g}")
        for name, val in (("A", A), ("B", B), ("K", K), ("Q", Q), ("R", R)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        M.setflags(write=False)
        object.__setattr__(self, "v", int(self.v))
        object.__setattr__(self, "closed_loop", M)
        object.__setattr__(self, "_cache", {})

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def rho(self):
        return spectral_radius(self.A)

    def to_dict(self):
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "K": self.K.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "v": self.v,
        }

    def F_table(self, max_tau):
        """Array ``T`` with ``T[t] = F(t)`` for ``t = 0..max_tau`` (``F(0) = 0``)."""
        cached = self._cache.get("F")
        if cached is None or cached.shape[0] <= max_tau:
            size = max(max_tau + 1, 64)
            T = np.zeros((size, self.n, self.n))
            for t in range(1, size):
                T[t] = self.A @ T[t - 1] @ self.A.T + self.R
            T.setflags(write=False)
            self._cache["F"] = cached = T
        return cached[: max_tau + 1]

    def closed_loop_powers(self, max_e):
        cached = self._cache.get("M")
        if cached is None or cached.shape[0] <= max_e:
            cached = power_table(self.closed_loop, max(max_e, 64))
            cached.setflags(write=False)
            self._cache["M"] = cached
        return cached[: max_e + 1]


@dataclass(frozen=True)
class ControllabilityClass:
    """``kind`` is ``"one_step"``, ``"v_step"`` or ``"non_finite"``.

    For ``v_step`` ``v`` is the nilpotency index of ``A + B K``; for
    ``non_finite`` it is the approximation horizon the caller chose.
    """

    kind: str
    v: int

    def __str__(self):
        if self.kind == "one_step":
            return "OneStep"
        if self.kind == "v_step":
            return f"VStep({self.v})"
        return f"NonFiniteStep(approx v={self.v})"


def classify(p, max_v=10):
    """Smallest ``v <= max_v`` with ``(A + B K)^v == 0``."""
    M = p.closed_loop
    if is_zero(M):
        return ControllabilityClass("one_step", 1)
    P = M
    for v in range(2, max_v + 1):
        P = P @ M
        if is_zero(P):
            return ControllabilityClass("v_step", v)
    return ControllabilityClass("non_finite", p.v)


def F(p, tau):
    if tau < 1 or int(tau) != tau:
        raise ValueError(f"tau must be a positive integer, got {tau}")
    return np.array(p.F_table(int(tau))[int(tau)])


def G(p, x, Y):
    Mx = mat_pow(p.closed_loop, x)
    return Mx @ np.asarray(Y, dtype=float) @ Mx.T


def stage_cost_one_step(p, phi):
    """Per-slot cost ``Tr(Q F(phi))`` of the one-step controllable MDP."""
    if phi < 2 or int(phi) != phi:
        raise ValueError(f"phi must be an integer >= 2, got {phi}")
    return float(np.trace(p.Q @ p.F_table(int(phi))[int(phi)]))


def _split_params(p, taus, phis):
    taus = [int(t) for t in taus]
    phis = [int(f) for f in phis]
    if len(phis) != p.v or len(taus) != p.v - 1:
        raise ValueError(
            f"expected {p.v - 1} taus (tau^1..) and {p.v} phis for v={p.v}, "
            f"got {len(taus)} and {len(phis)}"
        )
    if min(phis) < 1 or (taus and min(taus) < 1):
        raise ValueError("state parameters must be positive")
    return taus, phis


def covariance_vstep(p, taus, phis):
    """Plant-state covariance for the v-step state parameters.

    ``taus`` holds ``tau^1 .. tau^(v-1)`` and ``phis`` holds
    ``phi^0 .. phi^(v-1)``. Each gap ``phi^i - tau^(i+1)`` entering the
    attenuation exponent is floored at zero; only states produced by
    clamping at the truncation bound can have a negative gap.
    """
    taus, phis = _split_params(p, taus, phis)
    Ft = p.F_table(max(phis + taus))
    P = Ft[phis[0]].copy()
    x = 0
    for i in range(p.v - 1):
        x += max(phis[i] - taus[i], 0)
        if phis[i + 1] > taus[i]:
            P += G(p, x, Ft[phis[i + 1]] - Ft[taus[i]])
    return P


def stage_cost_vstep(p, taus, phis):
    return float(np.trace(p.Q @ covariance_vstep(p, taus, phis)))


def stage_costs(p, taus, phis):
    """Vectorised ``stage_cost_vstep`` over rows of integer arrays.

    ``taus`` has shape ``(N, v-1)`` and ``phis`` shape ``(N, v)``.
    """
    taus = np.asarray(taus, dtype=np.int64).reshape(len(phis), p.v - 1)
    phis = np.asarray(phis, dtype=np.int64)
    top = int(max(phis.max(), taus.max() if taus.size else 1))
    Ft = p.F_table(top)
    base = np.einsum("ij,tji->t", p.Q, Ft)
    cost = base[phis[:, 0]]
    if p.v == 1:
        return cost
    # H[x, a] = Tr(Q M^x F(a) M^x^T)
    max_x = int(np.clip(phis[:, :-1] - taus, 0, None).sum(axis=1).max())
    Mp = p.closed_loop_powers(max_x)
    H = np.einsum("ij,xjk,akl,xil->xa", p.Q, Mp, Ft, Mp)
    x = np.zeros(len(phis), dtype=np.int64)
    for i in range(p.v - 1):
        x += np.clip(phis[:, i] - taus[:, i], 0, None)
        gate = phis[:, i + 1] > taus[:, i]
        cost = cost + np.where(gate, H[x, phis[:, i + 1]] - H[x, taus[:, i]], 0.0)
    return cost
