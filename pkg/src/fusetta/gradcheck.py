"""Central finite-difference gradient oracle.

The oracle never reuses the analytic backward path: it re-evaluates the loss
at perturbed parameter values, one scalar coordinate at a time.
"""
import numpy as np

from .errors import OracleError, ParameterError
from .tensor import Tensor, backward, no_grad


def _named_tensors(params):
    """Accept a FusionParams-like object (with .tensors) or a plain dict."""
    tensors = getattr(params, "tensors", params)
    return {name: t for name, t in tensors.items() if t.requires_grad}


def finite_diff_grad(loss_fn, params, h: float = 1e-5):
    """Central-difference gradient estimate per trainable scalar parameter.

    loss_fn is called with `params` and must return the loss as a float or a
    1x1 Tensor; evaluations run with gradient recording disabled.
    Returns {group name: gradient array}.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ParameterError(f"finite_diff_grad: h must be in [1e-7, 1e-3], got {h}")

    def evaluate():
        with no_grad():
            value = loss_fn(params)
        if isinstance(value, Tensor):
            value = value.item()
        return float(value)

    grads = {}
    for name, t in _named_tensors(params).items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = evaluate()
            flat[idx] = orig - h
            lm = evaluate()
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise OracleError(
                    f"non-finite loss while perturbing {name}[{idx}]"
                )
            gflat[idx] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def analytic_grad(loss_fn, params):
    """Gradients via one forward + backward, {group name: array}."""
    tensors = _named_tensors(params)
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn(params)
    backward(loss)
    return {name: t.grad.copy() for name, t in tensors.items()}


def max_rel_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Worst relative disagreement between two gradient sets.

    The denominator is floored so that coordinates whose true gradient is
    ~0 are compared absolutely at the floor scale rather than amplifying
    finite-difference noise.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(loss_fn, params, h: float = 1e-5, floor: float = 1e-4) -> float:
    """Max relative error between backward() and the finite-difference oracle."""
    ana = analytic_grad(loss_fn, params)
    num = finite_diff_grad(loss_fn, params, h)
    return max_rel_error(ana, num, floor)
