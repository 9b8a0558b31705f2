# utils/check_runner.py
"""
Plain-python runner for the test modules: `python test_geometry.py` prints one line per check
"""

import inspect
import sys
import tempfile
import traceback
from pathlib import Path
from typing import Any, Dict, Iterator, List, Tuple


def _cases(fn) -> Iterator[Tuple[str, Dict[str, Any]]]:
    """Expand pytest.mark.parametrize marks into (label, kwargs) pairs"""
    cases: List[Tuple[str, Dict[str, Any]]] = [("", {})]
    for mark in getattr(fn, "pytestmark", []):
        if mark.name != "parametrize":
            continue
        names = mark.args[0]
        names = [n.strip() for n in names.split(",")] if isinstance(names, str) else list(names)
        expanded = []
        for i, value in enumerate(mark.args[1]):
            values = value if len(names) > 1 else (value,)
            for label, kwargs in cases:
                expanded.append((f"{label}[{i}]", {**kwargs, **dict(zip(names, values))}))
        cases = expanded
    yield from cases


def run_module_tests(namespace: Dict[str, Any], include_slow: bool = False) -> int:
    """Run every test_* function of a module namespace; returns the number of failures"""
    module = namespace.get("__file__", "tests")
    print(f"Running checks in {Path(module).name}")
    print("=" * 50)
    failures = 0
    for name, fn in list(namespace.items()):
        if not name.startswith("test_") or not callable(fn):
            continue
        marks = {m.name for m in getattr(fn, "pytestmark", [])}
        if "slow" in marks and not include_slow:
            print(f"- {name} (slow, skipped)")
            continue
        params = inspect.signature(fn).parameters
        for label, kwargs in _cases(fn):
            if "tmp_path" in params:
                kwargs["tmp_path"] = Path(tempfile.mkdtemp())
            try:
                fn(**kwargs)
                print(f"✓ {name}{label}")
            except Exception as e:
                failures += 1
                print(f"✗ {name}{label}: {type(e).__name__}: {e}")
                traceback.print_exc()
    print("=" * 50)
    if failures:
        print(f"❌ {failures} check(s) failed")
    else:
        print("✅ All checks passed")
    return failures


def main(namespace: Dict[str, Any]) -> None:
    sys.exit(1 if run_module_tests(namespace, include_slow="--slow" in sys.argv) else 0)
