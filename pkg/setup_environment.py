#!/usr/bin/env python3
"""
Setup script for the Maxwell shape-sensitivity toolkit
Creates run directories, writes the default configurations and a .env template
"""

import sys
from pathlib import Path

from dotenv import load_dotenv

from utils.run_config import write_default_configs

ENV_TEMPLATE = """# Logging
MAXSHAPE_LOG_LEVEL=INFO
MAXSHAPE_LOG_JSON=false

# Worker threads for assembly and independent finite-difference solves
MAXSHAPE_THREADS=1

# Output location and default seed
MAXSHAPE_RUNS_DIR=runs
MAXSHAPE_DEFAULT_SEED=0
"""


def setup_environment(root: Path = Path(".")) -> bool:
    """Set up run directories, default configs and .env; returns False if a required file is missing"""

    print("Maxwell Shape Sensitivity Toolkit - Setup")
    print("=" * 50)

    print("\nCreating directories...")
    for dir_name in ("runs", "configs", "meshes"):
        dir_path = root / dir_name
        if not dir_path.exists():
            dir_path.mkdir(parents=True, exist_ok=True)
            print(f"✅ Created {dir_name}/")
        else:
            print(f"✓ {dir_name}/ already exists")

    print("\nWriting default configurations...")
    config_dir = root / "configs"
    existing = {p.name for p in config_dir.glob("*.json")}
    if {"nibc.json", "npec.json", "ntc.json"} <= existing:
        print("✓ configs/nibc.json, npec.json, ntc.json already exist")
    else:
        for path in write_default_configs(config_dir):
            print(f"✅ Wrote {path}")

    print("\nChecking configuration...")
    env_path = root / ".env"
    if not env_path.exists():
        print("\n⚠️  No .env file found. Creating template...")
        env_path.write_text(ENV_TEMPLATE)
        print("✅ Created .env template file")
    else:
        load_dotenv(env_path)
        print("✅ .env file found")

    print(f"\nPython version: {sys.version}")
    if sys.version_info < (3, 9):
        print("⚠️  Python 3.9+ is required")
    else:
        print("✅ Python version OK")

    print("\nChecking required files...")
    ok = True
    for file_name in ("app.py", "experiment_manager.py", "requirements.txt"):
        if (root / file_name).exists():
            print(f"✅ {file_name} found")
        else:
            print(f"❌ {file_name} missing")
            ok = False

    print("\n" + "=" * 50)
    print("\nSetup complete!")
    print("\nNext steps:")
    print("1. Install dependencies: pip install -r requirements.txt")
    print("2. Check the installation: python test_setup.py")
    print("3. Validate a mesh: python check_mesh.py spherical-shell 1")
    print("4. Run a solve: python app.py solve --config configs/nibc.json --out runs/nibc")
    print("5. Run the verification battery: python app.py verify --config configs/nibc.json --out runs/verify")
    return ok


if __name__ == "__main__":
    sys.exit(0 if setup_environment() else 1)
