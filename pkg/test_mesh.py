#!/usr/bin/env python3
"""Tests for mesh generation, the plain-text mesh format and the mesh checks"""

import numpy as np
import pytest

from check_mesh import check_bundle, check_mesh
from create_mesh import BUILTIN_MESHES, generate_builtin, load_mesh_bundle, read_mesh, write_mesh
from geometry import Mesh
from utils.errors import MeshError

TET_VERTICES = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
TET_FACES = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])


def _single_tet():
    return Mesh(TET_VERTICES, np.array([[3, 1, 0, 2]]), {"gammaR": TET_FACES}, name="tet")


def test_single_tet_mesh():
    mesh = _single_tet()
    assert mesh.n_edges == 6
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
    assert mesh.volumes[0] == pytest.approx(1.0 / 6.0)
    patch = mesh.patch("gammaR")
    centroid = TET_VERTICES.mean(axis=0)
    face_centers = TET_VERTICES[patch.triangles].mean(axis=1)
    assert np.all(np.einsum("fd,fd->f", patch.normals, face_centers - centroid) > 0)
    assert check_mesh(mesh)["checks"]["gammaR_closed"]


def test_degenerate_tet_rejected():
    flat = TET_VERTICES.copy()
    flat[3] = [0.5, 0.5, 0.0]
    with pytest.raises(MeshError):
        Mesh(flat, np.array([[0, 1, 2, 3]]), {})


def test_bad_tags_rejected():
    with pytest.raises(MeshError):
        Mesh(TET_VERTICES, np.array([[0, 1, 2, 3]]), {"outer": TET_FACES})
    with pytest.raises(MeshError):
        Mesh(TET_VERTICES, np.array([[0, 1, 2, 3]]), {"gammaR": TET_FACES[:2], "gamma": TET_FACES[1:3]})


@pytest.mark.parametrize("kind", BUILTIN_MESHES)
def test_builtin_meshes_pass_checks(kind):
    bundle = generate_builtin(kind, 0)
    result = check_bundle(bundle)
    assert result["passed"], result["checks"]
    assert bundle.boundary_tag == ("interface" if kind == "ball" else "gamma")


def test_builtin_arguments_validated():
    with pytest.raises(MeshError):
        generate_builtin("torus", 0)
    with pytest.raises(MeshError):
        generate_builtin("ball", 7)
    with pytest.raises(MeshError):
        generate_builtin("spherical-shell", 0, inner_radius=2.0, outer_radius=1.0)


def test_refinement_shrinks_mesh_size_and_volume_error():
    coarse = generate_builtin("spherical-shell", 0)
    fine = generate_builtin("spherical-shell", 1)
    assert fine.mesh.mesh_size() < coarse.mesh.mesh_size()
    assert check_bundle(fine)["volume_relative_error"] < check_bundle(coarse)["volume_relative_error"]


def test_write_read_round_trip(tmp_path):
    mesh = generate_builtin("ball", 0).mesh
    path = write_mesh(mesh, tmp_path / "ball.mesh")
    loaded = read_mesh(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.tets, mesh.tets)
    assert np.array_equal(loaded.tet_regions, mesh.tet_regions)
    assert loaded.summary()["patches"] == mesh.summary()["patches"]


def test_load_bundle_from_file(tmp_path):
    path = write_mesh(generate_builtin("spherical-shell", 0).mesh, tmp_path / "shell.mesh")
    bundle = load_mesh_bundle(None, 0, str(path), 1.0, 2.0)
    assert bundle.kind == "file"
    assert bundle.outer_surface is not None and bundle.outer_surface.radius == pytest.approx(2.0)


def test_read_errors(tmp_path):
    with pytest.raises(MeshError):
        read_mesh(tmp_path / "missing.mesh")
    bad = tmp_path / "bad.mesh"
    bad.write_text("VERTICES 2\n0 0 0\n")
    with pytest.raises(MeshError):
        read_mesh(bad)
    unknown = tmp_path / "unknown.mesh"
    unknown.write_text("NODES 1\n0 0 0\n")
    with pytest.raises(MeshError):
        read_mesh(unknown)


def test_locate_and_deform():
    mesh = generate_builtin("spherical-shell", 0).mesh
    centroids = mesh.tet_vertices().mean(axis=1)
    assert np.array_equal(mesh.locate(centroids), np.arange(mesh.n_tets))
    scaled = mesh.deformed(lambda v: 1.1 * v)
    assert scaled.volumes.sum() == pytest.approx(1.1 ** 3 * mesh.volumes.sum())


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
