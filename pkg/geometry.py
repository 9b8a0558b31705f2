# geometry.py - Meshes, reference surfaces, deformation maps and geometric coefficients
"""
Geometry layer of the toolkit

Holds the tetrahedral mesh with tagged boundary patches, analytic reference surfaces
(sphere, ellipsoid, plane) with exact curvature data, triangulated surfaces with discrete
surface operators, the deformation map phi = id + t*h and the pointwise geometric
coefficients used by the pulled-back forms.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from utils.errors import (
    DegenerateNormal,
    DegenerateTriangle,
    EvaluationOutOfDomain,
    MeshError,
    NonInvertible,
    SupportViolation,
)
from utils.quadrature import TRI_BARYCENTRIC, TRI_WEIGHTS

logger = logging.getLogger(__name__)

TAGS = ("gamma", "gammaR", "interface")
REGION_EXTERIOR = 0
REGION_INTERIOR = 1

# Local edges of a tet with ascending vertex order; orientation low -> high
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
# Local edges lying on the face opposite each local vertex
FACE_EDGES = np.array([
    [e for e, (i, j) in enumerate(LOCAL_EDGES) if opposite not in (i, j)]
    for opposite in range(4)
])

ADMISSIBLE_STEP = 0.5


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass
class BoundaryPatch:
    """Tagged triangles with oriented unit normals and their adjacent tets"""
    tag: str
    triangles: np.ndarray       # (nf, 3) vertex ids, ascending
    normals: np.ndarray         # (nf, 3)
    areas: np.ndarray           # (nf,)
    tets: np.ndarray            # (nf,) tet on the side n points into (gamma, interface) or the only tet (gammaR)
    local_face: np.ndarray      # (nf,) local vertex of `tets` opposite the triangle
    edges: np.ndarray           # (nf, 3) global edge ids of the triangle
    inner_tets: np.ndarray      # (nf,) tet on the D side for interfaces, -1 otherwise
    inner_local_face: np.ndarray

    @property
    def size(self) -> int:
        return int(self.triangles.shape[0])

    def vertices(self, mesh: "Mesh") -> np.ndarray:
        return mesh.vertices[self.triangles]

    def quadrature_points(self, mesh: "Mesh") -> np.ndarray:
        return np.einsum("qv,fvd->fqd", TRI_BARYCENTRIC, mesh.vertices[self.triangles])

    def quadrature_weights(self) -> np.ndarray:
        return self.areas[:, None] * TRI_WEIGHTS[None, :]


class Mesh:
    """Tetrahedral mesh with globally oriented edges and tagged boundary/interface patches"""

    def __init__(self, vertices: np.ndarray, tets: np.ndarray,
                 triangles: Dict[str, np.ndarray],
                 tet_regions: Optional[np.ndarray] = None, name: str = "mesh"):
        self.name = name
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.tets = np.sort(np.asarray(tets, dtype=np.int64), axis=1)
        if tet_regions is None:
            tet_regions = np.full(self.tets.shape[0], REGION_EXTERIOR, dtype=int)
        self.tet_regions = np.asarray(tet_regions, dtype=int)

        if self.tets.size == 0:
            raise MeshError("Mesh has no tetrahedra")
        if self.tets.max() >= self.vertices.shape[0] or self.tets.min() < 0:
            raise MeshError("Tetrahedron references a missing vertex")

        self._build_coefficients()
        self._build_edges()
        self._build_faces()
        self.patches: Dict[str, BoundaryPatch] = {}
        for tag, tris in triangles.items():
            if tag not in TAGS:
                raise MeshError(f"Unknown boundary tag '{tag}'")
            tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
            if tris.shape[0]:
                self.patches[tag] = self._build_patch(tag, tris)
        self._check_tag_partition()
        self._locator = None

        logger.debug(
            f"Mesh {name}: {self.n_vertices} vertices, {self.n_tets} tets, {self.n_edges} edges, "
            f"patches {[(t, p.size) for t, p in self.patches.items()]}"
        )

    # -- construction helpers -------------------------------------------------

    def _build_coefficients(self):
        corners = self.vertices[self.tets]                       # (nt, 4, 3)
        mat = np.concatenate([np.ones(corners.shape[:2] + (1,)), corners], axis=2)
        dets = np.linalg.det(mat)
        self.volumes = np.abs(dets) / 6.0
        if np.any(self.volumes < 1e-15):
            raise MeshError(f"{int(np.sum(self.volumes < 1e-15))} degenerate tetrahedra")
        # coeffs[t, :, v] are (c0, grad) of the barycentric function of vertex v
        self.bary_coeffs = np.linalg.inv(mat)
        self.bary_grads = np.transpose(self.bary_coeffs[:, 1:, :], (0, 2, 1))   # (nt, 4, 3)

    def _build_edges(self):
        nv = self.vertices.shape[0]
        pairs = self.tets[:, LOCAL_EDGES]                         # (nt, 6, 2)
        keys = pairs[..., 0] * nv + pairs[..., 1]
        unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
        self._edge_keys = unique_keys
        self.edges = np.stack([unique_keys // nv, unique_keys % nv], axis=1)
        self.tet_edges = inverse.reshape(self.tets.shape[0], 6)

    def _build_faces(self):
        nv = self.vertices.shape[0]
        faces = np.stack([np.delete(self.tets, v, axis=1) for v in range(4)], axis=1)   # (nt, 4, 3)
        keys = (faces[..., 0] * nv + faces[..., 1]) * nv + faces[..., 2]
        flat = keys.ravel()
        order = np.argsort(flat, kind="stable")
        self._face_keys_sorted = flat[order]
        self._face_owner = order // 4
        self._face_local = order % 4

    def _face_key(self, tris: np.ndarray) -> np.ndarray:
        nv = self.vertices.shape[0]
        return (tris[:, 0] * nv + tris[:, 1]) * nv + tris[:, 2]

    def _build_patch(self, tag: str, tris: np.ndarray) -> BoundaryPatch:
        tris = np.sort(tris, axis=1)
        keys = self._face_key(tris)
        left = np.searchsorted(self._face_keys_sorted, keys, side="left")
        right = np.searchsorted(self._face_keys_sorted, keys, side="right")
        count = right - left
        if np.any(count == 0):
            raise MeshError(f"{int(np.sum(count == 0))} '{tag}' triangles are not tetrahedron faces")
        if np.any(count > 2):
            raise MeshError(f"Non-manifold faces in '{tag}'")

        first_tet = self._face_owner[left]
        first_local = self._face_local[left]
        second = np.where(count == 2, right - 1, left)
        second_tet = np.where(count == 2, self._face_owner[second], -1)
        second_local = np.where(count == 2, self._face_local[second], -1)

        if tag == "interface":
            if np.any(count != 2):
                raise MeshError("Interface triangles must be shared by two tetrahedra")
            first_outside = self.tet_regions[first_tet] == REGION_EXTERIOR
            outer = np.where(first_outside, first_tet, second_tet)
            outer_local = np.where(first_outside, first_local, second_local)
            inner = np.where(first_outside, second_tet, first_tet)
            inner_local = np.where(first_outside, second_local, first_local)
            if np.any(self.tet_regions[outer] == self.tet_regions[inner]):
                raise MeshError("Interface triangles must separate the two regions")
        else:
            if np.any(count != 1):
                raise MeshError(f"'{tag}' triangles must lie on the mesh boundary")
            outer, outer_local = first_tet, first_local
            inner = np.full(tris.shape[0], -1)
            inner_local = np.full(tris.shape[0], -1)

        corners = self.vertices[tris]
        raw = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        double_area = np.linalg.norm(raw, axis=1)
        if np.any(double_area < 2e-14):
            raise DegenerateTriangle(f"Degenerate triangle in '{tag}'")
        normals = raw / double_area[:, None]

        opposite = self.vertices[self.tets[outer, outer_local]]
        side = np.einsum("fd,fd->f", normals, opposite - corners[:, 0])
        # gammaR normals leave the domain; gamma/interface normals point into the adjacent exterior tet
        flip = side > 0 if tag == "gammaR" else side < 0
        normals[flip] *= -1.0

        edges = self.edge_index(np.concatenate([tris[:, [0, 1]], tris[:, [0, 2]], tris[:, [1, 2]]]))
        edges = edges.reshape(3, -1).T
        return BoundaryPatch(
            tag=tag, triangles=tris, normals=normals, areas=0.5 * double_area,
            tets=outer, local_face=outer_local, edges=edges,
            inner_tets=inner, inner_local_face=inner_local,
        )

    def _check_tag_partition(self):
        seen = {}
        for tag, patch in self.patches.items():
            for key in self._face_key(patch.triangles):
                if key in seen:
                    raise MeshError(f"Face tagged both '{seen[key]}' and '{tag}'")
                seen[key] = tag

    # -- queries -----------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_tets(self) -> int:
        return int(self.tets.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def has_tag(self, tag: str) -> bool:
        return tag in self.patches

    def patch(self, tag: str) -> BoundaryPatch:
        if tag not in self.patches:
            raise MeshError(f"Mesh '{self.name}' has no '{tag}' triangles")
        return self.patches[tag]

    def edge_index(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.sort(np.asarray(pairs, dtype=np.int64), axis=1)
        keys = pairs[:, 0] * self.vertices.shape[0] + pairs[:, 1]
        idx = np.searchsorted(self._edge_keys, keys)
        idx = np.minimum(idx, self._edge_keys.size - 1)
        if np.any(self._edge_keys[idx] != keys):
            raise MeshError("Edge lookup failed")
        return idx

    def edge_dofs(self, tag: str) -> np.ndarray:
        if tag not in self.patches:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.patches[tag].edges)

    def tet_vertices(self) -> np.ndarray:
        return self.vertices[self.tets]

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)

    def mesh_size(self) -> float:
        return float(self.edge_lengths().max())

    def tet_sizes(self) -> np.ndarray:
        lengths = self.edge_lengths()
        return lengths[self.tet_edges].max(axis=1)

    def barycentric(self, points: np.ndarray, tet_ids: np.ndarray) -> np.ndarray:
        coeffs = self.bary_coeffs[tet_ids]
        return coeffs[..., 0, :] + np.einsum("...d,...dv->...v", points, coeffs[..., 1:, :])

    def locate(self, points: np.ndarray, tolerance: float = 1e-9) -> np.ndarray:
        """Containing tet of every point, searched among nearest centroids"""
        points = np.atleast_2d(points)
        if self._locator is None:
            self._locator = cKDTree(self.tet_vertices().mean(axis=1))
        k = min(24, self.n_tets)
        _, candidates = self._locator.query(points, k=k)
        candidates = candidates.reshape(points.shape[0], k)
        bary = self.barycentric(points[:, None, :], candidates)
        worst = bary.min(axis=2)
        inside = worst >= -tolerance
        pick = np.where(inside.any(axis=1), inside.argmax(axis=1), worst.argmax(axis=1))
        best = worst[np.arange(points.shape[0]), pick]
        if np.any(best < -0.25):
            raise EvaluationOutOfDomain(f"{int(np.sum(best < -0.25))} points outside the mesh")
        return candidates[np.arange(points.shape[0]), pick]

    def deformed(self, vertex_map: Callable[[np.ndarray], np.ndarray]) -> "Mesh":
        """Same connectivity with mapped vertices (deformed-mesh oracle)"""
        triangles = {tag: p.triangles for tag, p in self.patches.items()}
        return Mesh(vertex_map(self.vertices), self.tets, triangles, self.tet_regions,
                    name=f"{self.name}-deformed")

    def region_volume(self, region: int) -> float:
        return float(self.volumes[self.tet_regions == region].sum())

    def summary(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "vertices": self.n_vertices,
            "tets": self.n_tets,
            "edges": self.n_edges,
            "mesh_size": self.mesh_size(),
            "patches": {tag: p.size for tag, p in self.patches.items()},
            "volume": float(self.volumes.sum()),
        }


# ---------------------------------------------------------------------------
# Analytic reference surfaces
# ---------------------------------------------------------------------------

def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


@dataclass(frozen=True)
class AnalyticSurface:
    """
    Sphere, ellipsoid or plane with exact normal extension and curvature data

    orientation = +1 means normals point outward from D; -1 flips n, S and the curvature
    """
    kind: str
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radii: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    plane_normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    orientation: float = 1.0

    @classmethod
    def sphere(cls, center=(0.0, 0.0, 0.0), radius: float = 1.0) -> "AnalyticSurface":
        return cls("sphere", tuple(map(float, center)), (float(radius),) * 3)

    @classmethod
    def ellipsoid(cls, center, radii) -> "AnalyticSurface":
        return cls("ellipsoid", tuple(map(float, center)), tuple(map(float, radii)))

    @classmethod
    def plane(cls, point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0)) -> "AnalyticSurface":
        n = np.asarray(normal, dtype=float)
        return cls("plane", tuple(map(float, point)), (np.inf,) * 3, tuple(n / np.linalg.norm(n)))

    @property
    def radius(self) -> float:
        return float(self.radii[0])

    def _rel(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) - np.asarray(self.center)

    def _gradient_F(self, x):
        rel = self._rel(x)
        return 2.0 * rel / np.asarray(self.radii) ** 2

    def normal(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "plane":
            n = np.broadcast_to(np.asarray(self.plane_normal), x.shape).copy()
        elif self.kind == "sphere":
            rel = self._rel(x)
            n = rel / np.linalg.norm(rel, axis=-1, keepdims=True)
        else:
            grad = self._gradient_F(x)
            n = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
        return self.orientation * n

    def normal_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Jacobian J_n of the normal extension"""
        x = np.asarray(x, dtype=float)
        eye = np.eye(3)
        if self.kind == "plane":
            return np.zeros(x.shape + (3,))
        n = self.orientation * self.normal(x)
        proj = eye - _outer(n, n)
        if self.kind == "sphere":
            jac = proj / np.linalg.norm(self._rel(x), axis=-1)[..., None, None]
        else:
            grad = self._gradient_F(x)
            hessian = np.diag(2.0 / np.asarray(self.radii) ** 2)
            jac = proj @ hessian / np.linalg.norm(grad, axis=-1)[..., None, None]
        return self.orientation * jac

    def shape_operator(self, x: np.ndarray) -> np.ndarray:
        """Weingarten map P J_n P (symmetric on the tangent plane)"""
        n = self.normal(x)
        proj = np.eye(3) - _outer(n, n)
        return proj @ self.normal_jacobian(x) @ proj

    def additive_curvature(self, x: np.ndarray) -> np.ndarray:
        return np.trace(self.shape_operator(x), axis1=-2, axis2=-1)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "plane":
            return np.einsum("...d,d->...", self._rel(x), np.asarray(self.plane_normal))
        rel = self._rel(x)
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=-1) - self.radius
        level = np.sqrt(np.sum((rel / np.asarray(self.radii)) ** 2, axis=-1))
        return np.linalg.norm(rel, axis=-1) * (1.0 - 1.0 / level)

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rel = self._rel(x)
        if self.kind == "plane":
            n = np.asarray(self.plane_normal)
            return x - np.einsum("...d,d->...", rel, n)[..., None] * n
        if self.kind == "sphere":
            return np.asarray(self.center) + self.radius * rel / np.linalg.norm(rel, axis=-1, keepdims=True)
        level = np.sqrt(np.sum((rel / np.asarray(self.radii)) ** 2, axis=-1, keepdims=True))
        return np.asarray(self.center) + rel / level

    def min_curvature_radius(self) -> float:
        if self.kind == "plane":
            return np.inf
        radii = np.asarray(self.radii)
        if self.kind == "sphere":
            return float(radii[0])
        return float(radii.min() ** 2 / radii.max())

    def tube_width(self) -> float:
        return 0.2 * self.min_curvature_radius()

    # -- analytic surface operators ------------------------------------------

    def surface_gradient(self, x: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        n = self.normal(x)
        return gradient - np.einsum("...d,...d->...", gradient, n)[..., None] * n

    def surface_divergence(self, x: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
        """div_G v from the ambient Jacobian of an extension of v"""
        n = self.normal(x)
        proj = np.eye(3) - _outer(n, n)
        return np.trace(proj @ jacobian, axis1=-2, axis2=-1)

    def vector_curl(self, x: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        return np.cross(self.normal(x), self.surface_gradient(x, gradient))

    def scalar_curl(self, x: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
        curl = np.stack([
            jacobian[..., 2, 1] - jacobian[..., 1, 2],
            jacobian[..., 0, 2] - jacobian[..., 2, 0],
            jacobian[..., 1, 0] - jacobian[..., 0, 1],
        ], axis=-1)
        return np.einsum("...d,...d->...", curl, self.normal(x))

    def descriptor(self) -> Dict[str, object]:
        return {"kind": self.kind, "center": list(self.center), "radii": [float(r) for r in self.radii]}


# ---------------------------------------------------------------------------
# Triangulated surfaces
# ---------------------------------------------------------------------------

class DiscreteSurface:
    """Closed or open triangulated surface with P1 surface operators"""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray, normals: Optional[np.ndarray] = None):
        triangles = np.asarray(triangles, dtype=np.int64)
        used, local = np.unique(triangles, return_inverse=True)
        self.global_nodes = used
        self.nodes = np.asarray(vertices, dtype=float)[used]
        self.triangles = local.reshape(triangles.shape)

        corners = self.nodes[self.triangles]
        raw = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        double_area = np.linalg.norm(raw, axis=1)
        if np.any(double_area < 2e-14):
            raise DegenerateTriangle(f"{int(np.sum(double_area < 2e-14))} triangles with area < 1e-14")
        self.areas = 0.5 * double_area
        ccw_normals = raw / double_area[:, None]
        self.normals = ccw_normals if normals is None else np.asarray(normals, dtype=float)

        # hat-function gradients in the triangle plane: n x (opposite edge) / 2A
        opposite = np.stack([
            corners[:, 2] - corners[:, 1],
            corners[:, 0] - corners[:, 2],
            corners[:, 1] - corners[:, 0],
        ], axis=1)
        self.hat_gradients = np.cross(ccw_normals[:, None, :], opposite) / double_area[:, None, None]
        self.lumped_mass = np.bincount(
            self.triangles.ravel(), weights=np.repeat(self.areas / 3.0, 3), minlength=self.nodes.shape[0]
        )

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def gradient(self, psi: np.ndarray) -> np.ndarray:
        """Piecewise-constant surface gradient of nodal values, (nf, 3)"""
        return np.einsum("fv,fvd->fd", psi[self.triangles], self.hat_gradients)

    def divergence(self, v: np.ndarray) -> np.ndarray:
        """Nodal weak divergence of a per-triangle tangential field (transposed gradient)"""
        contrib = -self.areas[:, None] * np.einsum("fd,fvd->fv", v, self.hat_gradients)
        out = np.zeros(self.n_nodes, dtype=np.result_type(v, float))
        np.add.at(out, self.triangles, contrib)
        return out / self.lumped_mass

    def vector_curl(self, psi: np.ndarray) -> np.ndarray:
        return np.cross(self.normals, self.gradient(psi))

    def scalar_curl(self, v: np.ndarray) -> np.ndarray:
        """curl_G v = div_G(v x n), evaluated through the per-triangle rotation"""
        return self.divergence(np.cross(v, self.normals))

    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros((self.n_nodes, 3))
        np.add.at(acc, self.triangles, np.repeat((self.areas[:, None] * self.normals)[:, None, :], 3, axis=1))
        return acc / np.linalg.norm(acc, axis=1, keepdims=True)

    def weingarten(self) -> np.ndarray:
        """Per-triangle least-squares shape operator from vertex-normal differences"""
        vn = self.vertex_normals()
        corners = self.nodes[self.triangles]
        t1 = corners[:, 1] - corners[:, 0]
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(self.normals, t1)

        rows, rhs = [], []
        for a, b in ((0, 1), (0, 2), (1, 2)):
            dx = corners[:, b] - corners[:, a]
            dn = vn[self.triangles[:, b]] - vn[self.triangles[:, a]]
            u1, u2 = np.einsum("fd,fd->f", dx, t1), np.einsum("fd,fd->f", dx, t2)
            w1, w2 = np.einsum("fd,fd->f", dn, t1), np.einsum("fd,fd->f", dn, t2)
            zero = np.zeros_like(u1)
            rows += [np.stack([u1, u2, zero], axis=1), np.stack([zero, u1, u2], axis=1)]
            rhs += [w1, w2]
        A = np.stack(rows, axis=1)                      # (nf, 6, 3)
        w = np.stack(rhs, axis=1)                       # (nf, 6)
        s = np.linalg.solve(np.einsum("fki,fkj->fij", A, A), np.einsum("fki,fk->fi", A, w)[..., None])[..., 0]
        return (s[:, 0, None, None] * _outer(t1, t1)
                + s[:, 1, None, None] * (_outer(t1, t2) + _outer(t2, t1))
                + s[:, 2, None, None] * _outer(t2, t2))

    def mass_matrix(self):
        local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        vals = self.areas[:, None, None] * local[None]
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        return coo_matrix((vals.ravel(), (rows, cols)), shape=(self.n_nodes,) * 2).tocsc()

    def project_quadrature_values(self, values: np.ndarray) -> np.ndarray:
        """L2 projection onto P1 of scalar data given at the 3-point rule, (nf, 3) -> nodal"""
        load = np.zeros(self.n_nodes, dtype=np.result_type(values, float))
        contrib = np.einsum("q,fq,qv->fv", TRI_WEIGHTS, values, TRI_BARYCENTRIC) * self.areas[:, None]
        np.add.at(load, self.triangles, contrib)
        lu = splu(self.mass_matrix())
        if np.iscomplexobj(load):
            return lu.solve(np.ascontiguousarray(load.real)) + 1j * lu.solve(np.ascontiguousarray(load.imag))
        return lu.solve(load)

    def quadrature_points(self) -> np.ndarray:
        return np.einsum("qv,fvd->fqd", TRI_BARYCENTRIC, self.nodes[self.triangles])


def surface_from_patch(mesh: Mesh, patch: BoundaryPatch) -> DiscreteSurface:
    return DiscreteSurface(mesh.vertices, patch.triangles, patch.normals)


# ---------------------------------------------------------------------------
# Diffeomorphism and pointwise coefficients
# ---------------------------------------------------------------------------

class Diffeomorphism:
    """phi(x) = x + t h(x) with Jacobian Id + t J_h"""

    def __init__(self, deformation, t: float):
        self.deformation = deformation
        self.t = float(t)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.t == 0.0:
            return np.array(x, dtype=float)
        return x + self.t * self.deformation.value(x)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        eye = np.broadcast_to(np.eye(3), np.shape(x) + (3,))
        if self.t == 0.0:
            return eye.copy()
        return eye + self.t * self.deformation.jacobian(x)

    def determinant(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.det(self.jacobian(x))


def build_diffeomorphism(deformation, t: float, sample_points: np.ndarray,
                         collar_points: Optional[np.ndarray] = None) -> Diffeomorphism:
    """
    Build phi = id + t*h after checking admissibility at the sample points

    Raises:
        NonInvertible: t * max|J_h| >= 0.5 or det J_phi <= 0 somewhere
        SupportViolation: h or J_h nonzero at a collar point
    """
    points = np.asarray(sample_points, dtype=float).reshape(-1, 3)
    if collar_points is not None and len(collar_points):
        collar = np.asarray(collar_points, dtype=float).reshape(-1, 3)
        leak = max(np.abs(deformation.value(collar)).max(), np.abs(deformation.jacobian(collar)).max())
        if leak > 1e-14:
            raise SupportViolation(f"Deformation reaches the artificial boundary collar (max {leak:.3e})")

    jac_norm = np.linalg.norm(deformation.jacobian(points), ord=2, axis=(-2, -1)).max() if points.size else 0.0
    if abs(t) * jac_norm >= ADMISSIBLE_STEP:
        raise NonInvertible(f"t*max|J_h| = {abs(t) * jac_norm:.3f} exceeds {ADMISSIBLE_STEP}")

    phi = Diffeomorphism(deformation, t)
    det = phi.determinant(points)
    if points.size and det.min() <= 0.0:
        raise NonInvertible(f"det J_phi = {det.min():.3e} at a sample point")
    return phi


def bulk_coefficients(jacobian: np.ndarray, det: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """M_h = J^T J / det J and N_h = det J * J^-1 J^-T"""
    if det is None:
        det = np.linalg.det(jacobian)
    det = np.asarray(det, dtype=float)
    if np.any(det <= 0.0):
        raise NonInvertible("det J_phi <= 0")
    inv = np.linalg.inv(jacobian)
    jt = np.swapaxes(jacobian, -1, -2)
    M = jt @ jacobian / det[..., None, None]
    N = det[..., None, None] * (inv @ np.swapaxes(inv, -1, -2))
    return M, N


def bulk_variation(jacobian_h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """First-order variations: M_dot = -(div h) Id + J_h + J_h^T, N_dot = -M_dot"""
    div = np.trace(jacobian_h, axis1=-2, axis2=-1)
    M_dot = -div[..., None, None] * np.eye(3) + jacobian_h + np.swapaxes(jacobian_h, -1, -2)
    return M_dot, -M_dot


def surface_kit(jacobian_phi: np.ndarray, jacobian_h: np.ndarray, normals: np.ndarray,
                shape_operator: Optional[np.ndarray] = None, curvature: Optional[np.ndarray] = None,
                h_values: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Surface Jacobian, transported normal and their first variations

    With curvature data (S, curvature, h) the variations use the Hadamard forms
    div_G h_T + curvature*h_n and -grad_G h_n + S h_T; otherwise the equivalent
    Jacobian forms tr(J_h) - n^T J_h n and -(Id - n n^T) J_h^T n.
    """
    jt = np.swapaxes(jacobian_phi, -1, -2)
    q = np.linalg.solve(jt, normals[..., None])[..., 0]
    q_norm = np.linalg.norm(q, axis=-1)
    if np.any(q_norm < 1e-12):
        raise DegenerateNormal("|J_phi^-T n| < 1e-12")
    det = np.linalg.det(jacobian_phi)
    n_tilde = q / q_norm[..., None]
    omega = det * q_norm
    proj = np.eye(3) - _outer(normals, normals)
    jh_t = np.swapaxes(jacobian_h, -1, -2)

    if shape_operator is not None and curvature is not None and h_values is not None:
        h_n = np.einsum("...d,...d->...", h_values, normals)
        grad_hn = np.einsum("...ij,...j->...i", proj,
                            np.einsum("...ij,...j->...i", jh_t, normals)
                            + np.einsum("...ij,...j->...i", shape_operator, h_values))
        h_t = h_values - h_n[..., None] * normals
        div_ht = np.trace(proj @ jacobian_h, axis1=-2, axis2=-1) - curvature * h_n
        omega_dot = div_ht + curvature * h_n
        delta_n = -grad_hn + np.einsum("...ij,...j->...i", shape_operator, h_t)
    else:
        omega_dot = np.trace(jacobian_h, axis1=-2, axis2=-1) - np.einsum(
            "...i,...ij,...j->...", normals, jacobian_h, normals)
        delta_n = -np.einsum("...ij,...j->...i", proj, np.einsum("...ij,...j->...i", jh_t, normals))

    return {
        "omega": omega,
        "omega_dot": omega_dot,
        "normal": n_tilde,
        "delta_n": delta_n,
        "projector": np.eye(3) - _outer(n_tilde, n_tilde),
    }


@dataclass
class GeometricKit:
    """Pointwise geometric coefficients of phi = id + t*h (arrays over evaluation points)"""
    t: float
    points: np.ndarray
    mapped_points: np.ndarray
    jacobian: np.ndarray
    det: np.ndarray
    M: np.ndarray
    N: np.ndarray
    M_dot: np.ndarray
    N_dot: np.ndarray
    jacobian_h: np.ndarray
    h_values: np.ndarray
    normals: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None
    omega_dot: Optional[np.ndarray] = None
    normal_t: Optional[np.ndarray] = None
    delta_n: Optional[np.ndarray] = None
    projector: Optional[np.ndarray] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def trace_map(self) -> np.ndarray:
        """P_h J_phi^-T, the transported tangential trace as a matrix"""
        inv_t = np.swapaxes(np.linalg.inv(self.jacobian), -1, -2)
        return self.projector @ inv_t

    @property
    def data_map(self) -> np.ndarray:
        """omega_h J_phi^-1, maps deformed tangential data to reference gamma_t data"""
        return self.omega[..., None, None] * np.linalg.inv(self.jacobian)


def geometric_kit(deformation, t: float, points: np.ndarray,
                  normals: Optional[np.ndarray] = None) -> GeometricKit:
    points = np.asarray(points, dtype=float)
    h_values = deformation.value(points)
    jac_h = deformation.jacobian(points)
    jac = np.eye(3) + t * jac_h
    det = np.linalg.det(jac)
    M, N = bulk_coefficients(jac, det)
    M_dot, N_dot = bulk_variation(jac_h)
    kit = GeometricKit(
        t=float(t), points=points, mapped_points=points + t * h_values, jacobian=jac, det=det,
        M=M, N=N, M_dot=M_dot, N_dot=N_dot, jacobian_h=jac_h, h_values=h_values,
    )
    if normals is not None:
        normals = np.broadcast_to(normals, points.shape)
        surf = surface_kit(jac, jac_h, normals)
        kit.normals = normals
        kit.omega = surf["omega"]
        kit.omega_dot = surf["omega_dot"]
        kit.normal_t = surf["normal"]
        kit.delta_n = surf["delta_n"]
        kit.projector = surf["projector"]
    return kit


# ---------------------------------------------------------------------------
# Covariant Piola transform
# ---------------------------------------------------------------------------

@dataclass
class PulledBackField:
    values: np.ndarray
    curl: Optional[np.ndarray] = None


def piola_pullback(field_fn: Callable[[np.ndarray], np.ndarray], phi: Diffeomorphism, points: np.ndarray,
                   curl_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> PulledBackField:
    """
    E_hat(x) = J_phi(x)^T E(phi(x)); with curl_fn also curl E_hat = det J J^-1 (curl E)(phi(x))
    """
    points = np.asarray(points, dtype=float)
    mapped = phi(points)
    values = np.asarray(field_fn(mapped))
    if not np.all(np.isfinite(values)):
        raise EvaluationOutOfDomain("Field is not evaluable at phi(x)")
    jac = phi.jacobian(points)
    pulled = np.einsum("...ji,...j->...i", jac, values)
    curl = None
    if curl_fn is not None:
        curl_values = np.asarray(curl_fn(mapped))
        det = np.linalg.det(jac)
        curl = det[..., None] * np.linalg.solve(jac, curl_values[..., None])[..., 0]
    return PulledBackField(values=pulled, curl=curl)
