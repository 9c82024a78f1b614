import os
import subprocess
import sys

import numpy as np
import pytest

from rfbs import model


@pytest.fixture(scope="session")
def desk_spec():
    return model.build_rfbsnet_desk()


@pytest.fixture(scope="session")
def desk_params(desk_spec):
    return model.init_params(desk_spec, seed=42)


def run_cli(args, env_extra=None, cwd=None):
    """Run the CLI in a fresh process; returns CompletedProcess."""
    env = dict(os.environ)
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "rfbs", *args],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )


def rand_f32(shape, seed):
    from rfbs.data import Prng

    n = int(np.prod(shape))
    return Prng(seed).fill_f64(n).reshape(shape).astype(np.float32)


def rand_f64(shape, seed, lo=-1.0, hi=1.0):
    from rfbs.data import Prng

    n = int(np.prod(shape))
    return (lo + (hi - lo) * Prng(seed).fill_f64(n)).reshape(shape)
