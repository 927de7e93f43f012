"""Shared test oracles: finite differences, gradients, target inversion."""

import numpy as np

from perlm.autodiff import Tensor


def reconstruct_original(instance) -> list[int]:
    """Brute-force inversion of the emitted target map (sigma semantics).

    Target t of row p says "the token originally at p now sits at t", so
    original[p] = input[t]; positions outside the map are untouched.
    """
    recovered = list(instance.input_ids)
    for p, t in zip(instance.pred_positions, instance.position_targets):
        recovered[p] = instance.input_ids[t]
    return recovered


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar-valued ``f`` at ``x`` by central finite differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        hi = f(x)
        flat[i] = saved - h
        lo = f(x)
        flat[i] = saved
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error with a small-denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def model_gradient_errors(state, loss_fn, h: float = 1e-5,
                          sample: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of every model parameter against backward().

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    ``sample`` limits the check to that many entries per parameter (chosen
    by ``rng``); None sweeps every entry. Returns the worst relative error.
    """
    from perlm.autodiff import no_grad

    state.zero_grads()
    loss_fn().backward()
    analytic = {k: v.copy() for k, v in state.grads().items()}

    worst = 0.0
    for name, param in state.params.items():
        flat = param.data.reshape(-1)
        grad = analytic.get(name)
        assert grad is not None, f"no gradient reached parameter {name!r}"
        grad = grad.reshape(-1)
        indices = range(flat.size)
        if sample is not None and flat.size > sample:
            indices = rng.choice(flat.size, size=sample, replace=False)
        for i in indices:
            saved = flat[i]
            with no_grad():
                flat[i] = saved + h
                hi = float(loss_fn().data)
                flat[i] = saved - h
                lo = float(loss_fn().data)
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * h)
            err = relative_error(np.asarray(grad[i]), np.asarray(numeric))
            worst = max(worst, err)
    return worst


def check_gradient(build_loss, values: dict[str, np.ndarray],
                   h: float = 1e-5) -> float:
    """Compare backward() gradients of ``build_loss`` against finite differences.

    ``build_loss`` maps a dict of name -> Tensor (requires_grad) to a scalar
    Tensor. Returns the worst relative error over all inputs and entries.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in values.items()}
    loss = build_loss(tensors)
    loss.backward()

    worst = 0.0
    for name, base in values.items():
        def f_scalar(x, _name=name):
            probe = {k: Tensor(v.copy(), requires_grad=False)
                     for k, v in values.items()}
            probe[_name] = Tensor(x, requires_grad=False)
            return float(build_loss(probe).data)

        numeric = central_difference(f_scalar, base.copy(), h=h)
        analytic = tensors[name].grad
        assert analytic is not None, f"no gradient reached input {name!r}"
        worst = max(worst, relative_error(analytic, numeric))
    return worst
