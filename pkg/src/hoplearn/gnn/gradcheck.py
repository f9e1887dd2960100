"""Central finite differences against :meth:`GNNModel.backward`."""
from __future__ import annotations

import numpy as np

from .batch import VectorizedBatch
from .model import GNNModel, loss_and_grad


def relative_error(numeric: np.ndarray, analytic: np.ndarray, floor: float = 1e-8) -> float:
    """``max|n - a| / max(max|n|, max|a|)`` over one tensor."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(numeric - analytic).max(initial=0.0) / scale)


def gradient_check(model: GNNModel, batch: VectorizedBatch, h: float = 1e-4) -> dict[str, float]:
    """Relative error per parameter tensor; the model should use float64."""
    def loss() -> float:
        logits, _ = model.forward(batch)
        return loss_and_grad(logits, batch.labels, model.config.multilabel)[0]

    logits, cache = model.forward(batch)
    _, d_logits = loss_and_grad(logits, batch.labels, model.config.multilabel)
    analytic = model.backward(cache, d_logits)
    errors = {}
    for name, arr in model.params().items():   # arrays are the live parameters
        numeric = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss()
            arr[idx] = old - h
            down = loss()
            arr[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        errors[name] = relative_error(numeric, analytic[name])
    return errors
