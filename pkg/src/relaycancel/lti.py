"""Dense state-space algebra for continuous and discrete LTI systems.

This module is the numerical substrate for the rest of the package:
construction, interconnection, zero-order-hold discretization, stability
tests, frequency responses and the discrete-time H-infinity norm.  All
systems are stored as dense real matrices; the orders encountered here
(a few hundred states after lifting) are small enough that dense linear
algebra is both simpler and fast.

A system is

    continuous:  dx/dt = A x + B u,   y = C x + D u
    discrete:    x[k+1] = A x[k] + B u[k],   y[k] = C x[k] + D u[k]

with ``dt is None`` marking continuous time and ``dt > 0`` the sampling
period of a discrete system.  Values are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.signal import tf2ss

__all__ = [
    "StateSpace",
    "FrequencyResponseSample",
    "STABILITY_MARGIN",
    "zoh_discretize",
    "interconnect",
    "is_stable",
    "stability_margin",
    "hinf_norm",
    "frequency_response",
    "response_sample",
    "subsystem",
    "from_tf",
]

# Eigenvalues closer than this to the stability boundary are treated as
# unstable (conservative: avoids false stability claims).
STABILITY_MARGIN = 1e-9


def _as_matrix(M, rows=None, cols=None) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if rows is not None and M.shape == (0, 0):
        M = np.zeros((rows, cols))
    return M


@dataclass(frozen=True)
class StateSpace:
    """Dense real state-space system.

    Parameters
    ----------
    A, B, C, D : array_like
        System matrices.  A must be square (n x n), B is n x m, C is
        p x n and D is p x m.  Empty A/B/C are allowed for static systems
        (n = 0), in which case the system is just the gain D.
    dt : float or None
        None for continuous time, sampling period in seconds otherwise.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float | None = None

    def __post_init__(self):
        A = _as_matrix(self.A)
        if A.size == 0:
            A = A.reshape(0, 0)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        n = A.shape[0]
        B = _as_matrix(self.B)
        if B.size == 0:
            B = B.reshape(n, B.shape[1] if B.ndim == 2 and n == 0 else 0)
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        C = _as_matrix(self.C)
        if C.size == 0:
            C = C.reshape(C.shape[0] if n == 0 else 0, n)
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        D = _as_matrix(self.D)
        p, m = D.shape
        if C.shape[0] not in (0, p) or B.shape[1] not in (0, m):
            raise ValueError(
                f"dimension mismatch: D is {D.shape}, C has {C.shape[0]} rows, "
                f"B has {B.shape[1]} columns"
            )
        if C.shape[0] == 0 and p > 0:
            C = np.zeros((p, n))
        if B.shape[1] == 0 and m > 0:
            B = np.zeros((n, m))
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive for a discrete system")
        for name, M in (("A", A), ("B", B), ("C", C), ("D", D)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"non-finite entries in {name}")
            M.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    @property
    def is_discrete(self) -> bool:
        return self.dt is not None

    @staticmethod
    def static(D, dt: float | None = None) -> "StateSpace":
        """Memoryless system y = D u."""
        D = _as_matrix(D)
        p, m = D.shape
        return StateSpace(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), D, dt)

    def __repr__(self):
        kind = "continuous" if self.dt is None else f"discrete(dt={self.dt})"
        return (
            f"StateSpace({kind}, n={self.n_states}, "
            f"inputs={self.n_inputs}, outputs={self.n_outputs})"
        )


def from_tf(num, den, dt: float | None = None) -> StateSpace:
    """SISO transfer function (descending coefficients) to state space."""
    A, B, C, D = tf2ss(np.atleast_1d(np.asarray(num, float)),
                       np.atleast_1d(np.asarray(den, float)))
    return StateSpace(A, B, C, D, dt)


def subsystem(sys: StateSpace, outputs, inputs) -> StateSpace:
    """Select output rows and input columns (state kept intact)."""
    outputs = np.atleast_1d(np.asarray(outputs, dtype=int))
    inputs = np.atleast_1d(np.asarray(inputs, dtype=int))
    return StateSpace(sys.A, sys.B[:, inputs], sys.C[outputs, :],
                      sys.D[np.ix_(outputs, inputs)], sys.dt)


def zoh_discretize(sys: StateSpace, T: float) -> StateSpace:
    """Exact zero-order-hold discretization at period T.

    Uses the augmented-matrix exponential

        expm([[A, B], [0, 0]] * T) = [[Ad, Bd], [0, I]]

    which avoids inverting A and is exact for inputs held constant over
    each period.  C and D are unchanged.
    """
    if sys.is_discrete:
        raise ValueError("zoh_discretize expects a continuous-time system")
    if not T > 0:
        raise ValueError("discretization period must be positive")
    n, m = sys.n_states, sys.n_inputs
    if n == 0:
        return StateSpace(sys.A, sys.B, sys.C, sys.D, dt=T)
    M = np.zeros((n + m, n + m))
    M[:n, :n] = sys.A
    M[:n, n:] = sys.B
    E = expm(M * T)
    if not np.all(np.isfinite(E)):
        raise ValueError("matrix exponential produced non-finite entries")
    return StateSpace(E[:n, :n], E[:n, n:], sys.C, sys.D, dt=T)


def _check_same_domain(sys1: StateSpace, sys2: StateSpace):
    if sys1.is_discrete != sys2.is_discrete:
        raise ValueError("cannot interconnect continuous with discrete systems")
    if sys1.is_discrete and abs(sys1.dt - sys2.dt) > 1e-12 * max(sys1.dt, sys2.dt):
        raise ValueError("sampling periods differ")


def _series(sys1: StateSpace, sys2: StateSpace) -> StateSpace:
    # signal flows sys1 -> sys2
    if sys2.n_inputs != sys1.n_outputs:
        raise ValueError(
            f"series: sys1 has {sys1.n_outputs} outputs, "
            f"sys2 expects {sys2.n_inputs} inputs"
        )
    n1, n2 = sys1.n_states, sys2.n_states
    A = np.block([
        [sys1.A, np.zeros((n1, n2))],
        [sys2.B @ sys1.C, sys2.A],
    ]) if n1 + n2 else np.zeros((0, 0))
    B = np.vstack([sys1.B, sys2.B @ sys1.D])
    C = np.hstack([sys2.D @ sys1.C, sys2.C])
    D = sys2.D @ sys1.D
    return StateSpace(A, B, C, D, sys1.dt)


def _parallel(sys1: StateSpace, sys2: StateSpace) -> StateSpace:
    if (sys1.n_inputs, sys1.n_outputs) != (sys2.n_inputs, sys2.n_outputs):
        raise ValueError("parallel: I/O dimensions must match")
    n1, n2 = sys1.n_states, sys2.n_states
    A = np.block([
        [sys1.A, np.zeros((n1, n2))],
        [np.zeros((n2, n1)), sys2.A],
    ]) if n1 + n2 else np.zeros((0, 0))
    B = np.vstack([sys1.B, sys2.B])
    C = np.hstack([sys1.C, sys2.C])
    D = sys1.D + sys2.D
    return StateSpace(A, B, C, D, sys1.dt)


def _lower_lft(plant: StateSpace, K: StateSpace, partition) -> StateSpace:
    """Close the lower loop of a partitioned plant with controller K.

    ``partition = (n_w, n_z)``: the first n_w plant inputs are the
    disturbance w and the first n_z outputs the performance z; the
    remaining channels (y, u) are closed through u = K y.
    """
    if partition is None:
        raise ValueError("lower_lft requires partition=(n_w, n_z)")
    n_w, n_z = partition
    n_u = plant.n_inputs - n_w
    n_y = plant.n_outputs - n_z
    if n_u <= 0 or n_y <= 0:
        raise ValueError("partition leaves no controller channels")
    if K.n_inputs != n_y or K.n_outputs != n_u:
        raise ValueError(
            f"controller is {K.n_outputs}x{K.n_inputs}, plant expects {n_u}x{n_y}"
        )
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    B1, B2 = B[:, :n_w], B[:, n_w:]
    C1, C2 = C[:n_z, :], C[n_z:, :]
    D11, D12 = D[:n_z, :n_w], D[:n_z, n_w:]
    D21, D22 = D[n_z:, :n_w], D[n_z:, n_w:]
    Ak, Bk, Ck, Dk = K.A, K.B, K.C, K.D

    loop = np.eye(n_u) - Dk @ D22
    cond = np.linalg.cond(loop)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError("singular algebraic loop: I - D22*Dk is not invertible")
    Y = np.linalg.solve(loop, np.eye(n_u))  # (I - Dk D22)^-1

    # u = Y (Ck xk + Dk C2 x + Dk D21 w)
    u_x = Y @ Dk @ C2
    u_xk = Y @ Ck
    u_w = Y @ Dk @ D21
    # y = C2 x + D21 w + D22 u
    y_x = C2 + D22 @ u_x
    y_xk = D22 @ u_xk
    y_w = D21 + D22 @ u_w

    n, nk = plant.n_states, K.n_states
    Acl = np.block([
        [A + B2 @ u_x, B2 @ u_xk],
        [Bk @ y_x, Ak + Bk @ y_xk],
    ]) if n + nk else np.zeros((0, 0))
    Bcl = np.vstack([B1 + B2 @ u_w, Bk @ y_w])
    Ccl = np.hstack([C1 + D12 @ u_x, D12 @ u_xk])
    Dcl = D11 + D12 @ u_w
    return StateSpace(Acl, Bcl, Ccl, Dcl, plant.dt)


def interconnect(kind: str, sys1: StateSpace, sys2: StateSpace,
                 partition=None) -> StateSpace:
    """Interconnect two systems.

    kind = "series"    : output of sys1 feeds sys2 (sys2 o sys1)
    kind = "parallel"  : common input, outputs added
    kind = "lower_lft" : sys1 is a partitioned plant, sys2 the controller
                         closing the lower (y, u) loop; see partition.
    """
    _check_same_domain(sys1, sys2)
    if kind == "series":
        return _series(sys1, sys2)
    if kind == "parallel":
        return _parallel(sys1, sys2)
    if kind == "lower_lft":
        return _lower_lft(sys1, sys2, partition)
    raise ValueError(f"unknown interconnection kind {kind!r}")


def _eigenvalues(sys: StateSpace) -> np.ndarray:
    if sys.n_states == 0:
        return np.zeros(0, dtype=complex)
    return np.linalg.eigvals(sys.A)


def stability_margin(sys: StateSpace) -> float:
    """Distance of the spectrum to the stability boundary (>0 means stable)."""
    lam = _eigenvalues(sys)
    if lam.size == 0:
        return np.inf
    if sys.is_discrete:
        return float(1.0 - np.max(np.abs(lam)))
    return float(-np.max(lam.real))


def is_stable(sys: StateSpace, margin: float = STABILITY_MARGIN) -> bool:
    """Spectral stability test with a conservative boundary margin.

    Continuous systems must have all eigenvalues with real part below
    -margin, discrete systems all eigenvalue moduli below 1 - margin;
    marginal eigenvalues count as unstable.
    """
    return stability_margin(sys) > margin


@dataclass(frozen=True)
class FrequencyResponseSample:
    """One frequency-response evaluation: omega [rad/s] and the value."""

    omega: float
    value: np.ndarray

    def __post_init__(self):
        value = np.atleast_2d(np.asarray(self.value, dtype=complex))
        value.setflags(write=False)
        object.__setattr__(self, "value", value)


def response_sample(sys: StateSpace, omega: float) -> FrequencyResponseSample:
    """Evaluate the response at omega as a tagged sample."""
    return FrequencyResponseSample(omega=float(omega),
                                   value=frequency_response(sys, omega))


def frequency_response(sys: StateSpace, omega: float) -> np.ndarray:
    """Evaluate the transfer matrix at real frequency omega [rad/s].

    Continuous: C (jw I - A)^-1 B + D.  Discrete: the same with
    z = exp(j w dt) in place of jw.
    """
    if sys.n_states == 0:
        return sys.D.astype(complex)
    z = np.exp(1j * omega * sys.dt) if sys.is_discrete else 1j * omega
    M = z * np.eye(sys.n_states) - sys.A
    try:
        X = np.linalg.solve(M, sys.B)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"resolvent singular at omega={omega}"
        ) from exc
    return sys.C @ X + sys.D


def _sigma_max_grid(sys: StateSpace, n_grid: int) -> float:
    """Largest singular value of the response over a [0, pi] theta grid."""
    thetas = np.unique(np.concatenate([
        np.linspace(0.0, np.pi, n_grid // 2),
        np.geomspace(1e-6, np.pi, n_grid // 2),
    ]))
    best = 0.0
    In = np.eye(sys.n_states)
    for th in thetas:
        z = np.exp(1j * th)
        G = sys.C @ np.linalg.solve(z * In - sys.A, sys.B) + sys.D
        s = np.linalg.svd(G, compute_uv=False)[0]
        if s > best:
            best = float(s)
    return best


def _has_unit_circle_crossing(sys: StateSpace, gamma: float) -> bool:
    """True when gamma is attained as a singular value of G(e^{j theta}).

    Builds the extended symplectic pencil of the bounded-real Riccati
    equation with Q = C'C, S = C'D, R = D'D - gamma^2 I and checks for
    generalized eigenvalues on the unit circle; a crossing at level gamma
    is equivalent to such an eigenvalue.
    """
    from scipy.linalg import eig as geig

    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, m = sys.n_states, sys.n_inputs
    # avoid a singular Popov matrix when gamma coincides with sigma(D)
    sv_D = np.linalg.svd(D, compute_uv=False) if D.size else np.zeros(0)
    if sv_D.size and np.min(np.abs(sv_D - gamma)) < 1e-12 * max(1.0, gamma):
        gamma = gamma * (1.0 + 1e-10) + 1e-300
    Q = C.T @ C
    S = C.T @ D
    R = D.T @ D - gamma**2 * np.eye(m)
    Zn = np.zeros((n, n))
    Znm = np.zeros((n, m))
    Zmn = np.zeros((m, n))
    L = np.block([
        [np.eye(n), Zn, Znm],
        [Zn, A.T, Znm],
        [Zmn, -B.T, np.zeros((m, m))],
    ])
    M = np.block([
        [A, Zn, B],
        [-Q, np.eye(n), -S],
        [S.T, Zmn, R],
    ])
    w = geig(M, L, right=False, homogeneous_eigvals=True)
    alpha, beta = w[0], w[1]
    finite = np.abs(beta) > 1e-12 * np.max(np.abs(beta), initial=1.0)
    lam = alpha[finite] / beta[finite]
    if lam.size == 0:
        return False
    return bool(np.any(np.abs(np.abs(lam) - 1.0) < 1e-8))


def hinf_norm(sys: StateSpace, tol: float = 1e-6, n_grid: int = 512,
              max_iter: int = 200) -> float:
    """H-infinity norm of a stable discrete-time system by bisection.

    The lower bracket is the largest singular value found on a frequency
    grid; each bisection probe runs the bounded-real spectral test on the
    associated symplectic pencil.  The result is within ``tol`` of the
    true norm and never below the grid lower bound.
    """
    if not sys.is_discrete:
        raise ValueError("hinf_norm is implemented for discrete-time systems")
    if not is_stable(sys):
        raise ValueError("hinf_norm requires a stable system")
    if sys.n_inputs == 0 or sys.n_outputs == 0:
        return 0.0
    sv_D = np.linalg.svd(sys.D, compute_uv=False)[0] if sys.D.size else 0.0
    if sys.n_states == 0:
        return float(sv_D)
    if np.allclose(sys.B, 0) or np.allclose(sys.C, 0):
        return float(sv_D)

    lo = max(_sigma_max_grid(sys, n_grid), sv_D * (1.0 + 1e-12))
    if lo == 0.0:
        return 0.0
    hi = lo * 10.0 + sv_D + 1.0
    # widen if the initial upper bracket is still attained somewhere
    grow = 0
    while _has_unit_circle_crossing(sys, hi) and grow < 40:
        hi *= 10.0
        grow += 1
    it = 0
    while hi - lo > tol:
        it += 1
        if it > max_iter:
            raise RuntimeError(
                f"hinf_norm bisection did not converge within {max_iter} iterations"
            )
        mid = 0.5 * (lo + hi)
        if _has_unit_circle_crossing(sys, mid):
            lo = mid
        else:
            hi = mid
    return float(max(0.5 * (lo + hi), lo))
