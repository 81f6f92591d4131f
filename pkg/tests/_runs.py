"""Training runs shared by several test modules; each run happens once per session."""

import time
from dataclasses import replace
from functools import lru_cache

from ldmole.training import toy_config, train

SWEEP_BETAS = (0.0, 0.01, 0.1, 1.0)
SWEEP_SEEDS = (0, 1, 2)

# wall-clock seconds of each cached run, so timing checks stay honest on reuse
DURATIONS: dict = {}


def _timed(key, config):
    t0 = time.perf_counter()
    result = train(config)
    DURATIONS[key] = time.perf_counter() - t0
    return result


def sweep_config(beta: float, seed: int):
    base = toy_config()
    return toy_config(beta=beta, seed=seed, k_target=2, epochs=10,
                      data=replace(base.data, n_train=1024, n_val=256))


@lru_cache(maxsize=None)
def sweep_run(beta: float, seed: int):
    return _timed(("sweep", beta, seed), sweep_config(beta, seed))


def prefix_config(router: str, epochs: int = 2):
    # the first epochs of the default ten-epoch run: same schedule, same streams
    base = toy_config(epochs=epochs)
    return replace(base, model=replace(base.model, router=router))


@lru_cache(maxsize=None)
def prefix_run(router: str):
    return train(prefix_config(router))


def overfit_config(router: str = "ld-shared"):
    base = toy_config()
    return toy_config(epochs=60, lr=1e-2, lr_milestones=(60,), weight_decay=0.0,
                      model=replace(base.model, router=router, dropout=0.0),
                      data=replace(base.data, n_train=32, n_val=64))


@lru_cache(maxsize=None)
def overfit_run(router: str = "ld-shared"):
    return train(overfit_config(router))
