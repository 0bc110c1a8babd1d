"""Dense linear state-space models and discrete-time simulation primitives.

Everything downstream (plants, estimators, the bus simulation) works in terms
of the discrete-time model

    x[k+1] = A x[k] + B u[k] + w[k]
    y[k]   = C x[k] + D u[k] + v[k]

with process noise covariance Q and measurement noise covariance R.  All
matrices are dense row-major float64 numpy arrays; vectors are (n, 1) columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-12


def as_matrix(value, name="matrix"):
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    require_finite(arr, name)
    return arr


def as_column(value, name="vector"):
    """Coerce to an (n, 1) float64 column vector."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim <= 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != 1:
        raise ValueError(f"{name} must be a column vector, got shape {arr.shape}")
    require_finite(arr, name)
    return arr


def require_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def is_symmetric(a, tol=SYMMETRY_TOL):
    return bool(np.all(np.abs(a - a.T) <= tol))


def require_symmetric_psd(a, name, tol=SYMMETRY_TOL):
    """Validate symmetry (within tol, absolute) and eigenvalues >= -tol."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not is_symmetric(a, tol):
        raise ValueError(f"{name} is not symmetric within {tol}")
    eigs = np.linalg.eigvalsh(0.5 * (a + a.T))
    if eigs.min(initial=0.0) < -tol:
        raise ValueError(f"{name} is not positive semidefinite (min eig {eigs.min():.3e})")


def require_symmetric_pd(a, name, tol=SYMMETRY_TOL):
    """Validate symmetry and strict positive definiteness (via Cholesky)."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not is_symmetric(a, tol):
        raise ValueError(f"{name} is not symmetric within {tol}")
    try:
        np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


@dataclass(frozen=True)
class LtiModel:
    """Discrete-time LTI model with noise covariances.

    A: state transition (n x n), B: input map (n x m), C: measurement map
    (p x n), D: feedthrough (p x m), Q: process-noise covariance (n x n,
    symmetric PSD), R: measurement-noise covariance (p x p, symmetric PD),
    ts: sampling period in seconds.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    ts: float

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))
        object.__setattr__(self, "C", as_matrix(self.C, "C"))
        object.__setattr__(self, "D", as_matrix(self.D, "D"))
        object.__setattr__(self, "Q", as_matrix(self.Q, "Q"))
        object.__setattr__(self, "R", as_matrix(self.R, "R"))
        a, b, c, d = self.A, self.B, self.C, self.D
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"A must be square, got shape {a.shape}")
        n = a.shape[0]
        if b.shape[0] != n:
            raise ValueError(f"B has {b.shape[0]} rows; expected n={n} from A")
        m = b.shape[1]
        if c.shape[1] != n:
            raise ValueError(f"C has {c.shape[1]} columns; expected n={n} from A")
        p = c.shape[0]
        if d.shape != (p, m):
            raise ValueError(f"D has shape {d.shape}; expected ({p}, {m}) from C and B")
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}; expected ({n}, {n})")
        if self.R.shape != (p, p):
            raise ValueError(f"R has shape {self.R.shape}; expected ({p}, {p})")
        require_symmetric_psd(self.Q, "Q")
        require_symmetric_pd(self.R, "R")
        if not self.ts > 0:
            raise ValueError(f"ts must be positive, got {self.ts}")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


@dataclass
class SimState:
    """Plant state vector plus step counter."""

    x: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.x = as_column(self.x, "x")


def lti_step(model, state, u, w=None, v=None):
    """Advance one sampling period.

    Returns (next_state, y) where y is computed from the pre-step state:
    y = C x[k] + D u[k] + v, next x = A x[k] + B u[k] + w.  Pass w/v as None
    (or zero vectors) for a noiseless step.
    """
    u = as_column(u, "u")
    if u.shape[0] != model.m:
        raise ValueError(f"u has length {u.shape[0]}; expected m={model.m}")
    if state.x.shape[0] != model.n:
        raise ValueError(f"state has length {state.x.shape[0]}; expected n={model.n}")
    w = np.zeros((model.n, 1)) if w is None else as_column(w, "w")
    if w.shape[0] != model.n:
        raise ValueError(f"w has length {w.shape[0]}; expected n={model.n}")
    v = np.zeros((model.p, 1)) if v is None else as_column(v, "v")
    if v.shape[0] != model.p:
        raise ValueError(f"v has length {v.shape[0]}; expected p={model.p}")
    y = model.C @ state.x + model.D @ u + v
    x_next = model.A @ state.x + model.B @ u + w
    require_finite(x_next, "next state")
    return SimState(x_next, state.k + 1), y


def discretize_zoh(Ac, Bc, ts, order=12):
    """Zero-order-hold discretization via truncated matrix-exponential series.

    Ad = sum_{i=0..order} (Ac ts)^i / i!
    Bd = (sum_{i=1..order} Ac^(i-1) ts^i / i!) Bc

    Accurate when ||Ac ts|| is well below 1, which holds for every model in
    this package at its sampling period.
    """
    Ac = as_matrix(Ac, "Ac")
    if Ac.shape[0] != Ac.shape[1]:
        raise ValueError(f"Ac must be square, got shape {Ac.shape}")
    Bc = as_matrix(Bc, "Bc")
    if Bc.shape[0] != Ac.shape[0]:
        raise ValueError(f"Bc has {Bc.shape[0]} rows; expected {Ac.shape[0]} from Ac")
    if not ts > 0:
        raise ValueError(f"ts must be positive, got {ts}")
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    n = Ac.shape[0]
    Ad = np.eye(n)
    S = np.zeros((n, n))  # integral series: sum Ac^(i-1) ts^i / i!
    term = np.eye(n)  # (Ac ts)^i / i!, starting at i=0
    for i in range(1, order + 1):
        S = S + term * (ts / i)
        term = term @ Ac * (ts / i)
        Ad = Ad + term
    return Ad, S @ Bc


def gaussian_noise(rng, cov):
    """Draw one zero-mean sample with the given covariance.

    Uses the Cholesky factor of cov; a singular-but-PSD cov falls back to a
    diagonal jitter of at most 1e-12.  cov identically zero yields an exact
    zero vector.  rng is a seeded numpy Generator, so identical seeds give
    identical sequences.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    if cov.shape != (n, n) or not is_symmetric(cov):
        raise ValueError(f"cov must be square symmetric, got shape {cov.shape}")
    if not np.any(cov):
        return np.zeros((n, 1))
    try:
        # A successful factorization is itself the PD certificate.
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        require_symmetric_psd(cov, "cov")
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(n))
    return chol @ rng.standard_normal((n, 1))
