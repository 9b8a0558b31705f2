# utils/rates.py
"""
Convergence-rate helpers for Taylor-remainder and refinement studies
"""

from typing import Any, Dict, Sequence

import numpy as np


def fit_loglog_slope(steps: Sequence[float], errors: Sequence[float]) -> Dict[str, Any]:
    """
    Least-squares slope of log(error) against log(step)

    Returns:
        Dict with slope, fit residual (rms in log space), the grid and the errors.
        Exact zeros cannot be fitted; they are reported with slope None.
    """
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    result = {
        "t_grid": [float(s) for s in steps],
        "errors": [float(e) for e in errors],
        "slope": None,
        "fit_residual": None,
        "exact_zero": bool(np.all(errors == 0.0)),
    }
    mask = errors > 0.0
    if mask.sum() < 2:
        return result

    x = np.log(steps[mask])
    y = np.log(errors[mask])
    coeffs = np.polyfit(x, y, 1)
    residual = y - np.polyval(coeffs, x)
    result["slope"] = float(coeffs[0])
    result["fit_residual"] = float(np.sqrt(np.mean(residual ** 2)))
    return result


def observed_rates(sizes: Sequence[float], errors: Sequence[float]) -> list:
    """Pairwise rates log(e_i/e_{i+1}) / log(h_i/h_{i+1})"""
    rates = []
    for (h0, e0), (h1, e1) in zip(zip(sizes, errors), zip(sizes[1:], errors[1:])):
        if e0 > 0 and e1 > 0:
            rates.append(float(np.log(e0 / e1) / np.log(h0 / h1)))
        else:
            rates.append(None)
    return rates


def increment_ratios(increments: Sequence[float]) -> list:
    ratios = []
    for previous, current in zip(increments, increments[1:]):
        ratios.append(float(current / previous) if previous > 0 else 0.0)
    return ratios


def is_monotone_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))
