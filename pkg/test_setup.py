#!/usr/bin/env python3
"""Test script to verify the toolkit installation: packages, settings, configs and a tiny solve"""

import importlib.util
import sys
from pathlib import Path

PACKAGES = {
    'numpy': 'Array math',
    'scipy': 'Sparse matrices, LU factorization, special functions',
    'pandas': 'Iteration logs, tables and system dumps',
    'pydantic': 'Run configuration validation',
    'pydantic_settings': 'MAXSHAPE_* environment settings',
    'dotenv': '.env loading',
    'click': 'Command-line interface',
    'rich': 'Console summaries',
    'pythonjsonlogger': 'JSON log formatting',
}


def check_packages() -> bool:
    ok = True
    for package, description in PACKAGES.items():
        if importlib.util.find_spec(package) is not None:
            print(f"✓ {package} installed - {description}")
        else:
            print(f"✗ {package} not installed - {description}")
            ok = False
    return ok


def test_required_packages_installed():
    assert check_packages()


def test_setup_environment_creates_layout(tmp_path):
    from setup_environment import setup_environment

    setup_environment(tmp_path)
    for dir_name in ("runs", "configs", "meshes"):
        assert (tmp_path / dir_name).is_dir()
    for name in ("nibc.json", "npec.json", "ntc.json"):
        assert (tmp_path / "configs" / name).exists()
    assert "MAXSHAPE_LOG_LEVEL" in (tmp_path / ".env").read_text()


def test_shipped_configs_are_valid():
    from utils.run_config import load_run_config

    for path in sorted(Path("configs").glob("*.json")):
        config = load_run_config(path)
        assert path.stem == config.problem


def test_tiny_solve():
    from create_mesh import generate_builtin
    from discretization import EdgeSpace, RadiationOperator, ScatteringProblem, WaveParameters
    from response import ZeroResponse
    from solver import solve_problem

    bundle = generate_builtin("spherical-shell", 0)
    problem = ScatteringProblem(EdgeSpace(bundle.mesh), WaveParameters(), ZeroResponse(bundle.surface),
                                RadiationOperator(radius=bundle.outer_radius))
    assert solve_problem(problem).diagnostics.converged


def main() -> int:
    print("Testing Maxwell Shape Sensitivity Toolkit setup...")
    print("=" * 50)
    print(f"Python version: {sys.version}")
    if sys.version_info < (3, 9):
        print("⚠️  Warning: Python 3.9+ required")
    else:
        print("✓ Python version OK")

    print("\n" + "=" * 50)
    print("Checking Python packages...")
    if not check_packages():
        print("\n❌ Missing packages. Run: pip install -r requirements.txt")
        return 1

    print("\n" + "=" * 50)
    print("Checking shipped configs and a level-0 solve...")
    from utils.check_runner import run_module_tests
    failures = run_module_tests(globals())
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
