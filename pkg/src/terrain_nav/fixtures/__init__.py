"""Shipped terrain specs: the four benchmark scenes plus extra scenarios."""

from pathlib import Path

FIXTURE_DIR = Path(__file__).parent
SCENARIO_DIR = FIXTURE_DIR / "scenarios"
BENCH_FIXTURES = ("arch_bridge", "flat_bridge", "forest", "slope")


def fixture_path(name: str) -> Path:
    for d in (FIXTURE_DIR, SCENARIO_DIR):
        p = d / f"{name}.json"
        if p.exists():
            return p
    raise FileNotFoundError(f"unknown fixture {name!r}")
