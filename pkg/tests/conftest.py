"""
Shared fixtures: seeded rng, reduced model config, tiny synthetic datasets,
and the central-difference gradient checker
"""
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pytest

import ct_data
from pvt_model import PvtConfig
from synthetic_data import SyntheticSpec, generate_synthetic
from tensor import DTYPE, Tape, Tensor, backward, matmul, reshape

# Key=value settings for a seconds-scale CLI run
TINY_CONFIG = {
    'embed_dims': '8,16,32,64',
    'depths': '1,1,1,1',
    'num_heads': '1,2,4,8',
    'sr_ratios': '4,2,1,1',
    'mlp_ratios': '2,2,2,2',
    'input_resolution': '32',
    'epochs': '2',
    'learning_rate': '0.001',
    'vote_rounds': '3',
    'val_vote_rounds': '1',
    'synth_cases_per_class': '2',
    'synth_slices_min': '4',
    'synth_slices_max': '10',
    'synth_image_size': '32',
    'synth_blob_radius': '3',
}

TINY_SYNTH = dict(cases_per_class=2, slices_min=4, slices_max=10, image_size=32, blob_radius=3)


@pytest.fixture(autouse=True)
def fresh_slice_cache():
    ct_data.clear_slice_cache()
    yield
    ct_data.clear_slice_cache()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def reduced_cfg() -> PvtConfig:
    return PvtConfig.reduced(32)


@pytest.fixture
def tiny_config_file(tmp_path) -> Path:
    path = tmp_path / 'tiny.env'
    path.write_text(''.join(f"{k}={v}\n" for k, v in TINY_CONFIG.items()), encoding='utf-8')
    return path


@pytest.fixture(scope='session')
def tiny_data(tmp_path_factory) -> Path:
    """<root>/train (2+2 cases) and <root>/val (2+2 cases), 32x32 slices"""
    root = tmp_path_factory.mktemp('tiny_data')
    generate_synthetic(SyntheticSpec(seed=1, **TINY_SYNTH), root / 'train')
    generate_synthetic(SyntheticSpec(seed=2, **TINY_SYNTH), root / 'val')
    return root


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    flat = reshape(out, (1, out.size))
    return reshape(matmul(flat, reshape(weights, (out.size, 1))), ())


def _gradient_error(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0, h: float = 1e-2,
                    entries: Optional[int] = None) -> float:
    """
    Norm-wise relative error between tape gradients and central differences
    of sum(fn(*inputs) * W) for a random W, over every requires_grad input.
    entries limits the check to that many random elements per input.
    """
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.standard_normal(fn(*inputs).shape))
    for x in inputs:
        x.zero_grad()
    with Tape() as tape:
        loss = _weighted_sum(fn(*inputs), weights)
    backward(loss, tape)

    w64 = weights.data.astype(np.float64)

    def objective() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * w64))

    analytic, numeric = [], []
    for x in inputs:
        if not x.requires_grad:
            continue
        grad = x.grad if x.grad is not None else np.zeros(x.shape, dtype=DTYPE)
        flat = x.data.reshape(-1)
        positions = np.arange(x.size) if entries is None else rng.choice(x.size, min(entries, x.size),
                                                                          replace=False)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + DTYPE(h)
            up, f_up = float(flat[i]), objective()
            flat[i] = orig - DTYPE(h)
            down, f_down = float(flat[i]), objective()
            flat[i] = orig
            numeric.append((f_up - f_down) / (up - down))
            analytic.append(float(grad.reshape(-1)[i]))
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def gradient_error():
    return _gradient_error


def random_tensor(rng: np.random.Generator, *shape, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


@pytest.fixture
def make_tensor():
    return random_tensor
