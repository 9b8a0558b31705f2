# utils/quadrature.py
"""
Fixed quadrature rules in barycentric form
All forms share these rules so that discrete adjoint identities hold exactly
"""

import numpy as np

# 4-point rule on the tetrahedron, exact for quadratics
_A = 0.5854101966249685
_B = 0.1381966011250105

TET_BARYCENTRIC = np.array([
    [_A, _B, _B, _B],
    [_B, _A, _B, _B],
    [_B, _B, _A, _B],
    [_B, _B, _B, _A],
])
TET_WEIGHTS = np.full(4, 0.25)

# 3-point interior rule on the triangle, exact for quadratics
TRI_BARYCENTRIC = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])
TRI_WEIGHTS = np.full(3, 1.0 / 3.0)

# 3-point Gauss-Legendre on [0, 1], used for edge moments
EDGE_POINTS = 0.5 + 0.5 * np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


def tet_points(vertices: np.ndarray) -> np.ndarray:
    """Quadrature points for tets given as (nt, 4, 3) vertex arrays -> (nt, 4, 3)"""
    return np.einsum("qv,tvd->tqd", TET_BARYCENTRIC, vertices)


def triangle_points(vertices: np.ndarray) -> np.ndarray:
    """Quadrature points for triangles given as (nf, 3, 3) vertex arrays -> (nf, 3, 3)"""
    return np.einsum("qv,fvd->fqd", TRI_BARYCENTRIC, vertices)
