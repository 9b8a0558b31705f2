#!/usr/bin/env python3
"""
Create tetrahedral meshes for the scattering problems and read/write the plain-text mesh format
Built-ins: ball (interface at the inner sphere), spherical-shell and cube-with-hole
"""

import logging
import sys
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from geometry import REGION_EXTERIOR, REGION_INTERIOR, TAGS, AnalyticSurface, Mesh
from utils.errors import MeshError

logger = logging.getLogger(__name__)

LEVEL_CELLS = {0: 4, 1: 8, 2: 16, 3: 24}
BUILTIN_MESHES = ("ball", "spherical-shell", "cube-with-hole")


@dataclass
class MeshBundle:
    """A mesh plus the analytic surfaces it approximates"""
    mesh: Mesh
    kind: str
    level: Optional[int]
    surface: Optional[AnalyticSurface]          # Gamma (obstacle boundary or interface)
    outer_surface: Optional[AnalyticSurface]    # Gamma_R when spherical
    inner_radius: float
    outer_radius: float

    @property
    def boundary_tag(self) -> str:
        return "interface" if self.mesh.has_tag("interface") else "gamma"

    def descriptor(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "level": self.level,
            "inner_radius": self.inner_radius,
            "outer_radius": self.outer_radius,
            **self.mesh.summary(),
        }


def _kuhn_cube(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conforming 6-tet Kuhn subdivision of an n^3 grid; returns node indices, tets and cell ids"""
    m = n + 1
    grid = np.stack(np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"), axis=-1).reshape(-1, 3)
    base = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), axis=-1).reshape(-1, 3)

    offsets = []
    for perm in permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] = 1
            path.append(step)
        offsets.append(path)
    offsets = np.array(offsets)                                  # (6, 4, 3)

    corners = base[:, None, None, :] + offsets[None]             # (nc, 6, 4, 3)
    ids = (corners[..., 0] * m + corners[..., 1]) * m + corners[..., 2]
    tets = ids.reshape(-1, 4)
    cells = np.repeat(np.arange(base.shape[0]), 6)
    return grid, tets, cells


def _boundary_faces(tets: np.ndarray, n_nodes: int) -> np.ndarray:
    tets = np.sort(tets, axis=1)
    faces = np.concatenate([np.delete(tets, v, axis=1) for v in range(4)])
    keys = (faces[:, 0] * n_nodes + faces[:, 1]) * n_nodes + faces[:, 2]
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    return faces[first[counts == 1]]


def generate_builtin(kind: str, level: int, inner_radius: float = 1.0,
                     outer_radius: float = 2.0) -> MeshBundle:
    """
    Build a mapped Kuhn mesh of the reference cube [-1, 1]^3

    Args:
        kind: ball | spherical-shell | cube-with-hole
        level: refinement level 0-3 (4, 8, 16, 24 cells per axis)
        inner_radius: radius of the obstacle / interface sphere
        outer_radius: radius of Gamma_R (sphere) or half-width of the cube

    Returns:
        MeshBundle with analytic surface data
    """
    if kind not in BUILTIN_MESHES:
        raise MeshError(f"Unknown builtin mesh '{kind}'")
    if level not in LEVEL_CELLS:
        raise MeshError(f"Refinement level must be one of {sorted(LEVEL_CELLS)}")
    if not 0.0 < inner_radius < outer_radius:
        raise MeshError("Need 0 < inner_radius < outer_radius")

    n = LEVEL_CELLS[level]
    grid, tets, cells = _kuhn_cube(n)
    node_level = np.abs(2 * grid - n).max(axis=1)                # n * |x|_inf
    base = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), axis=-1).reshape(-1, 3)
    cell_inner = np.abs(2 * base + 1 - n).max(axis=1) < n // 2
    tet_inner = cell_inner[cells]

    if kind == "ball":
        keep = np.ones(tets.shape[0], dtype=bool)
    else:
        keep = ~tet_inner
    tets = tets[keep]
    tet_inner = tet_inner[keep]

    # Map the reference cube to the physical domain
    x = -1.0 + 2.0 * grid / n
    s = node_level / n
    theta = np.clip(2.0 * s - 1.0, 0.0, 1.0)
    norm2 = np.linalg.norm(x, axis=1)
    direction = np.divide(x, norm2[:, None], out=np.zeros_like(x), where=norm2[:, None] > 0)
    if kind == "cube-with-hole":
        safe_s = np.where(s > 0, s, 1.0)
        points = ((1.0 - theta) * inner_radius)[:, None] * direction + (theta * outer_radius)[:, None] * x / safe_s[:, None]
    else:
        radius = inner_radius + theta * (outer_radius - inner_radius)
        core = s < 0.5
        radius = np.where(core, inner_radius * 2.0 * s, radius)
        points = radius[:, None] * direction

    # Boundary classification on the reference grid
    faces = _boundary_faces(tets, grid.shape[0])
    face_levels = node_level[faces]
    triangles = {
        "gammaR": faces[np.all(face_levels == n, axis=1)],
    }
    if kind == "ball":
        core_faces = _boundary_faces(tets[tet_inner], grid.shape[0])
        triangles["interface"] = core_faces
    else:
        triangles["gamma"] = faces[np.all(face_levels == n // 2, axis=1)]

    # Drop unused nodes
    used = np.unique(tets)
    remap = -np.ones(grid.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    regions = np.where(tet_inner, REGION_INTERIOR, REGION_EXTERIOR) if kind == "ball" else None

    mesh = Mesh(
        points[used], remap[tets],
        {tag: remap[tris] for tag, tris in triangles.items()},
        tet_regions=regions, name=f"{kind}-L{level}",
    )
    outer = AnalyticSurface.sphere((0.0, 0.0, 0.0), outer_radius) if kind != "cube-with-hole" else None
    logger.info(f"Generated {kind} level {level}: {mesh.n_tets} tets, {mesh.n_edges} edges")
    return MeshBundle(
        mesh=mesh, kind=kind, level=level,
        surface=AnalyticSurface.sphere((0.0, 0.0, 0.0), inner_radius),
        outer_surface=outer, inner_radius=float(inner_radius), outer_radius=float(outer_radius),
    )


# ---------------------------------------------------------------------------
# Plain-text format: VERTICES / TETS / TRIS <tag>, 0-based indices
# ---------------------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"VERTICES {mesh.n_vertices}\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        f.write(f"TETS {mesh.n_tets}\n")
        for tet, region in zip(mesh.tets, mesh.tet_regions):
            f.write(f"{tet[0]} {tet[1]} {tet[2]} {tet[3]} {region}\n")
        for tag in TAGS:
            if mesh.has_tag(tag):
                tris = mesh.patch(tag).triangles
                f.write(f"TRIS {tag} {tris.shape[0]}\n")
                for tri in tris:
                    f.write(f"{tri[0]} {tri[1]} {tri[2]}\n")
    logger.info(f"Wrote mesh to {path}")
    return path


def read_mesh(path, name: Optional[str] = None) -> Mesh:
    path = Path(path)
    if not path.exists():
        raise MeshError(f"Mesh file not found: {path}")

    lines = [line.split() for line in path.read_text().splitlines()]
    lines = [tokens for tokens in lines if tokens and not tokens[0].startswith("#")]
    vertices, tets, regions = None, None, None
    triangles: Dict[str, np.ndarray] = {}
    i = 0
    try:
        while i < len(lines):
            header = lines[i]
            section = header[0].upper()
            if section == "VERTICES":
                count = int(header[1])
                vertices = np.array(lines[i + 1:i + 1 + count], dtype=float)
            elif section == "TETS":
                count = int(header[1])
                rows = lines[i + 1:i + 1 + count]
                tets = np.array([r[:4] for r in rows], dtype=np.int64)
                regions = np.array([int(r[4]) if len(r) > 4 else REGION_EXTERIOR for r in rows])
            elif section == "TRIS":
                tag, count = header[1], int(header[2])
                triangles[tag] = np.array(lines[i + 1:i + 1 + count], dtype=np.int64).reshape(-1, 3)
            else:
                raise MeshError(f"Unknown section '{header[0]}' in {path}")
            i += 1 + count
    except (IndexError, ValueError) as e:
        raise MeshError(f"Malformed mesh file {path}: {e}") from e

    if vertices is None or tets is None:
        raise MeshError(f"{path} needs VERTICES and TETS sections")
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError("Vertices must have three coordinates")
    return Mesh(vertices, tets, triangles, regions, name=name or path.stem)


def load_mesh_bundle(builtin: Optional[str], level: int, path: Optional[str],
                     inner_radius: float, outer_radius: float) -> MeshBundle:
    if path:
        mesh = read_mesh(path)
        outer_pts = mesh.vertices[np.unique(mesh.patch("gammaR").triangles)] if mesh.has_tag("gammaR") else None
        outer = None
        if outer_pts is not None and np.ptp(np.linalg.norm(outer_pts, axis=1)) < 1e-8:
            outer = AnalyticSurface.sphere((0.0, 0.0, 0.0), float(np.linalg.norm(outer_pts[0])))
        return MeshBundle(mesh, "file", None, AnalyticSurface.sphere((0.0, 0.0, 0.0), inner_radius),
                          outer, float(inner_radius), float(outer_radius))
    return generate_builtin(builtin, level, inner_radius, outer_radius)


if __name__ == "__main__":
    if len(sys.argv) < 3:
        print("Usage: python create_mesh.py <ball|spherical-shell|cube-with-hole> <level> [output_file]")
        sys.exit(1)

    kind = sys.argv[1]
    level = int(sys.argv[2])
    output = sys.argv[3] if len(sys.argv) > 3 else f"{kind}_L{level}.mesh"

    bundle = generate_builtin(kind, level)
    write_mesh(bundle.mesh, output)
    summary = bundle.mesh.summary()
    print(f"✅ Created {output}")
    print(f"   Vertices: {summary['vertices']}  Tets: {summary['tets']}  Edges: {summary['edges']}")
    for tag, count in summary["patches"].items():
        print(f"   {tag}: {count} triangles")
