#!/usr/bin/env python3
"""
Validate a tetrahedral mesh before running the scattering problems
Checks tags, normal length and orientation, edge orientation, closedness of the tagged
surfaces and the enclosed volume against the analytic shape when one is known
"""

import logging
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from create_mesh import BUILTIN_MESHES, MeshBundle, generate_builtin, read_mesh
from geometry import REGION_INTERIOR, TAGS, AnalyticSurface, Mesh
from utils.errors import MaxwellShapeError

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-12


def _patch_is_closed(triangles: np.ndarray) -> bool:
    """Every triangle edge shared by exactly two triangles"""
    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [0, 2]], triangles[:, [1, 2]]])
    _, counts = np.unique(np.sort(pairs, axis=1), axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def check_mesh(mesh: Mesh, surface: Optional[AnalyticSurface] = None,
               outer_surface: Optional[AnalyticSurface] = None) -> Dict[str, Any]:
    """
    Run the mesh invariants and return a flat result dict

    Args:
        mesh: mesh to check
        surface: analytic obstacle/interface surface, for orientation and volume checks
        outer_surface: analytic Gamma_R, for its orientation check

    Returns:
        Dict with per-check booleans under "checks" plus measured values
    """
    checks: Dict[str, bool] = {}
    values: Dict[str, Any] = {"summary": mesh.summary()}

    checks["edges_oriented_low_to_high"] = bool(np.all(mesh.edges[:, 0] < mesh.edges[:, 1]))
    checks["has_gammaR"] = mesh.has_tag("gammaR")
    checks["has_gamma_or_interface"] = mesh.has_tag("gamma") or mesh.has_tag("interface")

    for tag in TAGS:
        if not mesh.has_tag(tag):
            continue
        patch = mesh.patch(tag)
        length_error = float(np.abs(np.linalg.norm(patch.normals, axis=1) - 1.0).max())
        values[f"{tag}_normal_length_error"] = length_error
        checks[f"{tag}_unit_normals"] = length_error < NORMAL_TOLERANCE
        checks[f"{tag}_closed"] = _patch_is_closed(patch.triangles)
        values[f"{tag}_area"] = float(patch.areas.sum())

        reference = outer_surface if tag == "gammaR" else surface
        if reference is not None:
            centroids = mesh.vertices[patch.triangles].mean(axis=1)
            alignment = np.einsum("fd,fd->f", patch.normals, reference.normal(centroids))
            values[f"{tag}_min_alignment"] = float(alignment.min())
            checks[f"{tag}_outward"] = bool(alignment.min() > 0.0)

    if surface is not None and surface.kind == "sphere":
        r = surface.radius
        inner_volume = 4.0 / 3.0 * np.pi * r ** 3
        if mesh.has_tag("interface"):
            enclosed = mesh.region_volume(REGION_INTERIOR)
        else:
            enclosed = None
        if outer_surface is not None and outer_surface.kind == "sphere":
            R = outer_surface.radius
            expected = 4.0 / 3.0 * np.pi * R ** 3 - (0.0 if mesh.has_tag("interface") else inner_volume)
            values["volume_relative_error"] = abs(float(mesh.volumes.sum()) - expected) / expected
        if enclosed is not None:
            values["interior_volume_relative_error"] = abs(enclosed - inner_volume) / inner_volume

    values["checks"] = checks
    values["passed"] = all(checks.values())
    return values


def check_bundle(bundle: MeshBundle) -> Dict[str, Any]:
    return check_mesh(bundle.mesh, bundle.surface, bundle.outer_surface)


def print_report(result: Dict[str, Any]) -> None:
    summary = result["summary"]
    print("=" * 50)
    print(f"Mesh {summary['name']}: {summary['vertices']} vertices, {summary['tets']} tets, "
          f"{summary['edges']} edges, h = {summary['mesh_size']:.4f}")
    print("=" * 50)
    for name, ok in result["checks"].items():
        print(f"{'✓' if ok else '✗'} {name}")
    for key in ("volume_relative_error", "interior_volume_relative_error"):
        if key in result:
            print(f"   {key}: {result[key]:.3e}")
    print("=" * 50)
    if result["passed"]:
        print("✅ Mesh is valid")
    else:
        print("❌ Mesh has problems")


def main(argv: List[str]) -> int:
    if len(argv) < 2:
        print("Usage: python check_mesh.py <mesh_file> | <builtin> <level>")
        print(f"   builtins: {', '.join(BUILTIN_MESHES)}")
        return 1
    try:
        if argv[1] in BUILTIN_MESHES:
            level = int(argv[2]) if len(argv) > 2 else 0
            result = check_bundle(generate_builtin(argv[1], level))
        else:
            result = check_mesh(read_mesh(argv[1]))
    except MaxwellShapeError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return 1
    print_report(result)
    return 0 if result["passed"] else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv))
