"""Shared fixtures; the synthetic benchmark runs once per session."""

import copy
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pytest

from panodeform.cli import DEFAULTS, run_pipeline

BENCH_SEEDS = (0, 1, 2)
BENCH_MODES = ("none", "ssl", "mpa", "mpa+ssl")


def _run_seed(args):
    seed, out_dir = args
    cfg = copy.deepcopy(DEFAULTS)
    cfg["seed"] = seed
    reports = run_pipeline(cfg, Path(out_dir), list(BENCH_MODES))
    return seed, {mode: json.loads(path.read_text()) for mode, path in reports.items()}


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Default synthetic pinhole-to-panorama benchmark over three fixed seeds.

    Returns {"elapsed": seconds, "seeds": {seed: {mode: eval-report}}}.
    Seeds run in parallel worker processes; each pipeline is deterministic.
    """
    base = tmp_path_factory.mktemp("benchmark")
    t0 = time.time()
    with ProcessPoolExecutor(max_workers=2) as pool:
        rows = list(pool.map(_run_seed, [(s, str(base / f"seed{s}")) for s in BENCH_SEEDS]))
    elapsed = time.time() - t0
    return {"elapsed": elapsed, "seeds": dict(rows), "base": base}
