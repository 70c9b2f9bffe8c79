"""
Shared fixtures: tiny datasets and configurations that train in seconds on a
CPU, and a central finite-difference gradient checker.
"""
from typing import Callable, Sequence

import pytest
import torch

from cldis.cldis_args import (
    CldisTrainingArguments,
    DataArguments,
    EvaluationArguments,
    ModelArguments,
    RunConfig,
)
from cldis.cldis_data import FactorSpec, generate


@pytest.fixture
def tiny_spec():
    return FactorSpec.from_cardinalities((2, 2, 2, 2, 2), (3, 16, 16))


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def metric_spec():
    # large enough for DCI (at least 100 rows), small enough to render instantly
    return FactorSpec.from_cardinalities((3, 2, 4, 4, 2), (1, 16, 16))


@pytest.fixture
def metric_dataset(metric_spec):
    return generate(metric_spec)


def make_tiny_config(out: str) -> RunConfig:
    return RunConfig(
        data=DataArguments(cardinalities=[2, 2, 4, 4, 2], channels=1, image_height=16, image_width=16),
        model=ModelArguments(latent_dim=4, timesteps=20, unet_channels=8, encoder_channels=8,
                             num_directions=2, sample_steps=3, navigation_sample_steps=2),
        training=CldisTrainingArguments(out=out, seed=7, batch_size=16, phase1_steps=3, phase2_steps=6,
                                        phase3_steps=2, log_every=2),
        evaluation=EvaluationArguments(pairs=4, factor_vae_votes=20, factor_vae_group_size=8,
                                       dci_samples=1000, curve_thresholds=[0.25, 0.5, 0.75]),
    )


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(str(tmp_path / 'run'))


def _check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                     elements: int = 6, h: float = 1e-6, seed: int = 0) -> None:
    """
    Compare the autograd gradient of ``loss_fn()`` with respect to
    ``tensors`` against central finite differences on a random subset of
    their elements. Everything should be float64.
    """
    for tensor in tensors:
        tensor.grad = None
    loss_fn().backward()
    analytic = [tensor.grad.detach().clone() for tensor in tensors]
    scale = max(float(grad.abs().max()) for grad in analytic)
    generator = torch.Generator()
    generator.manual_seed(seed)
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.view(-1)
        picks = torch.randperm(flat.numel(), generator=generator)[:elements]
        for i in picks.tolist():
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + h
                plus = float(loss_fn())
                flat[i] = original - h
                minus = float(loss_fn())
                flat[i] = original
            numeric = (plus - minus) / (2 * h)
            assert abs(numeric - float(grad.view(-1)[i])) <= 1e-3 * scale + 1e-7, \
                f"element {i}: numeric {numeric}, analytic {float(grad.view(-1)[i])}"


@pytest.fixture
def finite_difference_check():
    return _check_gradients


@pytest.fixture
def tiny_config_file(tmp_path):
    """A config file for a tiny run in ``tmp_path/run``."""
    return make_tiny_config(str(tmp_path / 'run')).write(str(tmp_path / 'config'))
