"""
Time stepping kernels for the Loewner vector field

Two schemes are provided for one substep of length h:

* rk4  - classical Runge-Kutta with the driver linear across the substep
* slit - the exact conformal map of a vertical slit with the driver frozen
         at the substep midpoint

All kernels are vectorised over arrays of points.
"""
import cmath

import numpy as np


def upper_sqrt(q: np.ndarray) -> np.ndarray:
    """Square root in the closed upper half-plane."""
    r = np.sqrt(np.asarray(q, dtype=complex))
    return np.where(r.imag < 0, -r, r)


def slit_root(w, q):
    """√q on the branch continuing w (upper half-plane, sign of Re w on the real line)."""
    r = cmath.sqrt(q)
    if r.imag < 0 or (r.imag == 0 and (r.real < 0) != (w.real < 0)):
        r = -r
    return r


def forward_slit(w: complex, h: float) -> complex:
    """w ↦ √(w² + 4h) for w = g − u; the driver u is constant on the substep."""
    return slit_root(w, w * w + 4.0 * h)


def forward_rk4(g: complex, u0: float, u1: float, h: float) -> complex:
    """One RK4 step of ġ = 2/(g − U) with U linear from u0 to u1."""
    um = 0.5 * (u0 + u1)
    k1 = 2.0 / (g - u0)
    k2 = 2.0 / (g + 0.5 * h * k1 - um)
    k3 = 2.0 / (g + 0.5 * h * k2 - um)
    k4 = 2.0 / (g + h * k3 - u1)
    return g + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def swallow_offset(w: complex, h: float, delta: float):
    """
    First s in [0, h] with |w² + 4s| ≤ δ² under the frozen-driver slit flow.

    Along the flow (g − u)² = w² + 4s, so the distance to the driver is
    √|w² + 4s|. Returns None when the point survives the substep.
    """
    q = w * w
    a, b = q.real, q.imag
    d4 = delta ** 4
    if b * b > d4:
        return None
    root = (d4 - b * b) ** 0.5
    lo, hi = (-a - root) / 4.0, (-a + root) / 4.0
    if hi < 0 or lo > h:
        return None
    return max(lo, 0.0)


def inverse_rk4(q: np.ndarray, u_hi, u_lo, h: float):
    """
    One backward RK4 step of dQ/dr = 2/(Q − U_r) from r to r − h.

    Returns the new state and the RK4 increment of log Q' (the variational
    equation d log Q'/dr = −2/(Q − U)², integrated along the same stages).
    """
    um = 0.5 * (u_hi + u_lo)
    k1 = 2.0 / (q - u_hi)
    k2 = 2.0 / (q - 0.5 * h * k1 - um)
    k3 = 2.0 / (q - 0.5 * h * k2 - um)
    k4 = 2.0 / (q - h * k3 - u_lo)
    q_new = q - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dlog = h / 12.0 * (k1 * k1 + 2.0 * k2 * k2 + 2.0 * k3 * k3 + k4 * k4)
    return q_new, dlog


def inverse_slit(q: np.ndarray, c, h: float):
    """
    Exact inverse slit step Q − c ↦ √((Q − c)² − 4h) with its log-derivative.

    The derivative of the step is (Q − c)/(Q_new − c).
    """
    w = q - c
    w_new = upper_sqrt(w * w - 4.0 * h)
    return c + w_new, np.log(w / w_new)


def trapezoid_weight(w0: np.ndarray, w1: np.ndarray, h: float) -> np.ndarray:
    """Trapezoid quadrature of 2·Re(W⁻²) over a substep from its end samples."""
    return 0.5 * h * (np.real(2.0 / (w0 * w0)) + np.real(2.0 / (w1 * w1)))
