"""Shared fixtures.

Heavy artifacts (corpus, smoke-trained checkpoint) are session-scoped. Set
PRINTFORGE_TEST_CACHE to a directory to persist them across pytest runs;
they are keyed only by the fixed seeds below, so delete the cache after
changing model or corpus code.
"""

import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("PRINTFORGE_THREADS", "1")))

from printforge import config, corpus, masterprint, pipeline  # noqa: E402

SEED = 0


def _cache_root(tmp_path_factory):
    env = os.environ.get("PRINTFORGE_TEST_CACHE")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.getbasetemp()


@pytest.fixture(scope="session")
def masterprints():
    """A handful of reusable prints, two per class."""
    out = {}
    for cls in masterprint.CLASSES:
        base = 7000 + 1000 * masterprint.CLASSES.index(cls)
        out[cls] = [masterprint.generate_masterprint(cls, base + 31 * i)
                    for i in range(2)]
    return out


@pytest.fixture(scope="session")
def run_config():
    cfg = config.RunConfig()
    cfg.seed = SEED
    return cfg


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory, run_config):
    """The default 200-image training corpus."""
    root = _cache_root(tmp_path_factory) / "corpus200"
    if not (root / "meta.jsonl").exists():
        pipeline.cmd_gen_corpus(run_config, root)
    return root


@pytest.fixture(scope="session")
def smoke_checkpoint(tmp_path_factory, run_config, smoke_corpus):
    """3000-step smoke training run; returns (checkpoint path, info dict)."""
    root = _cache_root(tmp_path_factory)
    ckpt = root / "smoke.gprnt"
    info_path = root / "smoke_info.json"
    if not (ckpt.exists() and info_path.exists()):
        t0 = time.time()
        _, losses = pipeline.cmd_train(run_config, smoke_corpus, ckpt)
        info = {
            "wall_seconds": time.time() - t0,
            "first100_mean": float(np.mean(losses[:100])),
            "last100_mean": float(np.mean(losses[-100:])),
            "steps": len(losses),
            "losses": [round(float(x), 6) for x in losses],
        }
        info_path.write_text(json.dumps(info))
    return ckpt, json.loads(info_path.read_text())


def pytest_terminal_summary(terminalreporter):
    for name, mod in sys.modules.items():
        if name.rpartition(".")[2] == "test_acceptance":
            lines = getattr(mod, "GATE_LINES", [])
            if lines:
                terminalreporter.section("acceptance criteria")
                for line in lines:
                    terminalreporter.write_line(line)
            break


@pytest.fixture(scope="session")
def smoke_model(smoke_checkpoint):
    model, meta = pipeline.load_model(smoke_checkpoint[0])
    model.eval()
    return model, meta
