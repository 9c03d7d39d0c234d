import copy

import numpy as np
import pytest
import torch

from semantic_cd.config import ModelConfig, PrompterConfig, toy_config
from semantic_cd.data import ClassVocabulary, SyntheticSpec, generate_synthetic_dataset
from semantic_cd.model import build_model


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_synthetic_dataset(SyntheticSpec(n_samples=8, H=64, W=64, seed=7), root)
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    from semantic_cd.data import load_second_directory

    return load_second_directory(toy_root)


@pytest.fixture
def small_cfg():
    """Toy architecture with a short context so unit tests stay fast."""
    return ModelConfig(prompter=PrompterConfig(context_length=8, max_length=32))


@pytest.fixture
def small_model(small_cfg):
    return build_model(small_cfg)


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 3, 64, 64, generator=g), torch.rand(2, 3, 64, 64, generator=g)


def finite_difference_check(loss_fn, params, eps=1e-5, n_entries=12, seed=0):
    """Compare autograd with central differences on a random subset of entries.

    Returns the norm-wise relative error over all probed entries.
    """
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                old = flat[idx].item()
                flat[idx] = old + eps
                up = loss_fn().item()
                flat[idx] = old - eps
                down = loss_fn().item()
                flat[idx] = old
                numeric.append((up - down) / (2 * eps))
                analytic.append(g.view(-1)[idx].item())
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom), a, n


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> one-line verdict, printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
