import numpy as np
import pytest
import torch

from protfuse.fixtures import synth_structure
from protfuse.model import ModelConfig
from protfuse.projector_fusion import ProjectorConfig
from protfuse.sequence_encoder import SequenceEncoderConfig
from protfuse.structure_encoder import StructureEncoderConfig
from protfuse.text_decoder import DecoderConfig


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)


def make_structure(pid="px", length=10, seed=0, hydro_bias=0.4):
    rng = np.random.default_rng(seed)
    return synth_structure(pid, length, rng, hydro_bias)


def tiny_model_config(d_model=32, d_struct=16, d_seq=16, rbf=8, dec_layers=2) -> ModelConfig:
    return ModelConfig(
        struct=StructureEncoderConfig(d_struct=d_struct, num_layers=2, edge_dim=rbf),
        seq=SequenceEncoderConfig(d_seq=d_seq, num_layers=2, num_heads=2),
        projector=ProjectorConfig(d_in_seq=d_seq, d_in_struct=d_struct,
                                  d_model=d_model, hidden=d_model, depth=2),
        decoder=DecoderConfig(d_model=d_model, num_layers=dec_layers, num_heads=2,
                              max_positions=512),
        graph_k=6,
        rbf_count=rbf,
    )


def vector_rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def finite_diff_gradcheck(loss_fn, parameters, eps=1e-5, max_coords_per_param=24,
                          seed=0) -> float:
    """Central-difference check of autograd gradients on sampled coordinates.

    Returns the vector relative error between analytic and numeric gradients
    over all sampled coordinates. Everything must already be float64.
    """
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for p in params:
        flat = p.detach().reshape(-1)
        grad = p.grad.detach().reshape(-1) if p.grad is not None else torch.zeros_like(flat)
        n = flat.numel()
        coords = rng.choice(n, size=min(n, max_coords_per_param), replace=False)
        for c in coords:
            c = int(c)
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + eps
                f_plus = float(loss_fn())
                flat[c] = orig - eps
                f_minus = float(loss_fn())
                flat[c] = orig
            numeric.append((f_plus - f_minus) / (2 * eps))
            analytic.append(float(grad[c]))
    return vector_rel_error(torch.tensor(analytic, dtype=torch.float64),
                            torch.tensor(numeric, dtype=torch.float64))
