import pytest
import torch

from ugcompress.model import CompressionLM, ModelConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(dim=16, n_layers=2, n_heads=2, mlp_dim=24, window=8, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def perturb_ug(model: CompressionLM, scale: float = 0.05, seed: int = 0) -> CompressionLM:
    """Move ug weights away from their base copies so both paths differ."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.ug_parameters().values():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny64():
    return perturb_ug(CompressionLM(tiny_config(), seed=11))


@pytest.fixture
def tiny32():
    return perturb_ug(CompressionLM(tiny_config(dtype="float32"), seed=12))
