"""Central finite-difference checks of the recorded gradients."""
from typing import Callable, List, Sequence

import numpy as np

from dqss.tensor.tensor import Tensor, no_grad


def numerical_grad(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3) -> np.ndarray:
    """d loss / d tensor by central differences, perturbing tensor.data in place."""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            up = loss_fn().item()
            flat[i] = original - h
            down = loss_fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3) -> List[float]:
    """Relative error between backward() and finite differences, one per tensor."""
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    return [relative_error(a, numerical_grad(loss_fn, t, h)) for a, t in zip(analytic, tensors)]
