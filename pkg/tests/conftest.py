import dataclasses

import numpy as np

import pytest

from afra import numkit as nk
from afra.datamodel import SyntheticConfig, generate_synthetic, time_split
from afra.embedder import EmbedderConfig
from afra.encoder import AfraModel, EncoderConfig, ModelConfig
from afra.numkit import Tensor

TINY_DATA = SyntheticConfig(n_users=200, n_articles=400, n_outfits=60, n_influencers=8)


def tiny_model_config(**embedder) -> ModelConfig:
    emb = dataclasses.replace(EmbedderConfig(max_len=30), **embedder)
    return ModelConfig(EncoderConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_positions=40), emb)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic(TINY_DATA, seed=3)


@pytest.fixture(scope="session")
def tiny_split(tiny_ds):
    return time_split(tiny_ds, tiny_ds.horizon_days - 1)


@pytest.fixture
def tiny_model(tiny_ds):
    return AfraModel(tiny_model_config(), tiny_ds.catalog, tiny_ds.vocab, seed=0)


def spot_check_grads(loss_fn, params: dict, n_coords: int = 5, seed: int = 0, h: float = 1e-5) -> dict:
    """Worst relative error between tape and central-difference gradients, per
    parameter tensor, over ``n_coords`` coordinates (preferring touched entries)."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        live = np.argwhere(g != 0)
        pool = live if len(live) else np.argwhere(np.ones_like(g, dtype=bool))
        picks = pool[rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)]
        coords = [tuple(int(i) for i in c) for c in picks]
        with nk.no_grad():
            num = nk.numerical_grad(lambda: float(loss_fn().data), p, h, coords)
        errs = [abs(g[c] - num[c]) / max(abs(g[c]), abs(num[c]), 1e-7) for c in coords]
        worst[name] = max(errs)
    return worst


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def fd_error(build, inputs, h=1e-5) -> float:
    """Worst relative error between tape gradients of scalar build(*inputs) and
    central differences, over all inputs."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = build(*inputs)
    out.backward()
    analytic = [t.grad.copy() for t in inputs]
    with nk.no_grad():
        f = lambda: float(build(*inputs).data)  # noqa: E731
        return max(rel_err(g, nk.numerical_grad(f, t, h)) for t, g in zip(inputs, analytic))


def fd_check(build, inputs, tol=1e-4, h=1e-5):
    assert fd_error(build, inputs, h) < tol


def weighted_sum(y):
    w = Tensor(np.random.default_rng(y.shape).normal(size=y.shape))
    return nk.sum(nk.mul(y, w))


# acceptance verdicts, printed together at the end of the run
VERDICTS: dict[int, str] = {}


def verdict(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[criterion] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
