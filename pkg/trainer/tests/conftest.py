import subprocess
import sys

import numpy as np
import pytest
from PIL import Image


def run_toolkit(*args):
    """Invoke the field toolkit's CLI as a subprocess (the file interface)."""
    proc = subprocess.run(
        [sys.executable, "-m", "rsgyro.cli", *map(str, args)],
        capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise RuntimeError(
            f"rsgyro {' '.join(map(str, args))} failed ({proc.returncode}):\n"
            f"{proc.stdout}\n{proc.stderr}"
        )
    return proc.stdout


def write_test_sources(src_dir, count=4, width=120, height=160, seed0=0):
    """Procedural smooth source PNGs for synthesis (trainer-local generator)."""
    src_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = np.random.default_rng(seed0 + i)
        low = rng.uniform(0.1, 0.9, size=(6, 5, 3))
        img = np.array(
            Image.fromarray((low * 255).astype(np.uint8)).resize(
                (width, height), Image.BILINEAR
            ),
            dtype=np.float64,
        )
        # a few vertical bars to give the shear something to bite on
        for _ in range(3):
            x0 = int(rng.uniform(5, width - 10))
            bar_w = int(rng.uniform(2, 6))
            img[:, x0:x0 + bar_w] *= rng.uniform(0.2, 0.6)
        Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(
            src_dir / f"src{i}.png"
        )


@pytest.fixture(scope="session")
def vectors_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("vectors") / "vectors.json"
    run_toolkit("export-testvectors", "--out", path)
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small single-pattern dataset synthesized through the toolkit CLI."""
    root = tmp_path_factory.mktemp("tinyds")
    src = root / "src"
    write_test_sources(src, count=3)
    out = root / "ds"
    run_toolkit(
        "synth", "--src", src, "--out", out, "--count", "8",
        "--identity-fraction", "0.25", "--seed", "11",
        "--single-pattern", "--patterns", "constant", "--pattern-seed", "77",
        "--width", "120", "--height", "160", "--model-res", "32",
    )
    return out
