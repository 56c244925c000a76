"""Central-difference checks of the autodiff engine on whole training graphs."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import CimConfig, build_cim, forward_features, forward_head
from .ssl import nt_xent_loss


def full_model_grad_check(seed: int = 0, markers: int = 3, batch: int = 4, size: int = 6, eps: float = 1e-5) -> dict[str, float]:
    """Relative gradient error of NT-Xent through a small CIM-S, per parameter and for the input.

    Runs in float64 with train-mode BatchNorm, i.e. the exact graph used during
    pretraining, on a reduced width so the finite differences stay cheap.
    """
    rng = np.random.default_rng(seed)
    model = build_cim(CimConfig(markers=markers, width=4, proj_dim=8, hidden_dim=8, input_size=size, seed=seed)).astype(np.float64)
    x = rng.uniform(0.0, 1.0, size=(2 * batch, markers, size, size))
    arrays = {**model.params, "input": x}

    def loss(t: dict[str, Tensor]) -> Tensor:
        work = model.copy()  # BN running stats are updated in train mode; keep each evaluation independent
        params = {k: v for k, v in t.items() if k != "input"}
        _, pooled = forward_features(work, t["input"], training=True, params=params)
        return nt_xent_loss(forward_head(work, pooled, "projection", params=params), temperature=0.2)

    return ad.grad_check_many(loss, arrays, eps)
