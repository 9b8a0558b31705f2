# utils/spherical_modes.py
"""
Real vector spherical harmonics and spherical Hankel ratios for the spectral
radiation operator on a sphere
"""

from math import factorial
from typing import Tuple

import numpy as np
from scipy.special import lpmv, spherical_jn, spherical_yn


def mode_degrees(order: int) -> np.ndarray:
    """Degree n of every (n, m) pair, n = 1..order, m = -n..n"""
    return np.array([n for n in range(1, order + 1) for _ in range(2 * n + 1)], dtype=int)


def _normalization(n: int, m: int) -> float:
    value = np.sqrt((2 * n + 1) / (4.0 * np.pi) * factorial(n - m) / factorial(n + m))
    return value * np.sqrt(2.0) if m > 0 else value


def real_vsh(points: np.ndarray, center: np.ndarray, radius: float,
             order: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tangential vector harmonics normalized in L2 of the sphere of given radius

    Args:
        points: (npts, 3) points on the sphere
        center: sphere center
        radius: sphere radius
        order: maximal degree N

    Returns:
        (U, V) of shape (npts, N(N+2), 3) with U = grad_S Y / sqrt(n(n+1)) / R
        and V = r_hat x U
    """
    rel = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    rho = np.linalg.norm(rel, axis=-1)
    rhat = rel / rho[:, None]
    cos_t = np.clip(rhat[:, 2], -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(1.0 - cos_t ** 2, 1e-30))
    phi = np.arctan2(rhat[:, 1], rhat[:, 0])

    e_theta = np.stack([cos_t * np.cos(phi), cos_t * np.sin(phi), -sin_t], axis=-1)
    e_phi = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)

    n_modes = order * (order + 2)
    U = np.zeros((rel.shape[0], n_modes, 3))
    column = 0
    for n in range(1, order + 1):
        scale = 1.0 / (np.sqrt(n * (n + 1)) * radius)
        for m in range(-n, n + 1):
            am = abs(m)
            norm = _normalization(n, am)
            p_nm = lpmv(am, n, cos_t)
            p_lower = lpmv(am, n - 1, cos_t) if am <= n - 1 else np.zeros_like(cos_t)
            # d/dtheta P_n^m(cos t) = [n cos t P_n^m - (n+m) P_{n-1}^m] / sin t
            dp_dtheta = (n * cos_t * p_nm - (n + am) * p_lower) / sin_t
            if m == 0:
                d_theta = norm * dp_dtheta
                d_phi_over_sin = np.zeros_like(cos_t)
            elif m > 0:
                d_theta = norm * dp_dtheta * np.cos(am * phi)
                d_phi_over_sin = -norm * am * p_nm * np.sin(am * phi) / sin_t
            else:
                d_theta = norm * dp_dtheta * np.sin(am * phi)
                d_phi_over_sin = norm * am * p_nm * np.cos(am * phi) / sin_t
            U[:, column, :] = scale * (d_theta[:, None] * e_theta + d_phi_over_sin[:, None] * e_phi)
            column += 1

    V = np.cross(rhat[:, None, :], U)
    return U, V


def hankel_ratio_coefficients(k: float, radius: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Modal coefficients of the exterior map on the sphere, outgoing h_n^(2) = j_n - i y_n for exp(+i omega t)

    The map E_T -> nu x curl E of an outgoing field acts as ik*b_n on the U_nm (gradient) modes
    and as -ik*a_n on the V_nm (rotated) modes, with a_n -> -1 and b_n -> 1 as kR grows, so that
    both tend to the first-order +ik absorbing term. Returned per mode (repeated over m).
    """
    degrees = mode_degrees(order)
    if degrees.size == 0:
        return np.zeros(0, dtype=complex), np.zeros(0, dtype=complex)
    x = k * radius
    h = spherical_jn(degrees, x) - 1j * spherical_yn(degrees, x)
    dh = spherical_jn(degrees, x, derivative=True) - 1j * spherical_yn(degrees, x, derivative=True)
    z = (1.0 + x * dh / h) / radius
    a = -1j * z / k
    b = -1j * k / z
    return a, b
