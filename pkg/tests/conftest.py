"""Shared finite-difference checking utilities and pytest hooks."""

import numpy as np

from tablegraph import tensor as T


def numeric_gradient(loss_fn, array: np.ndarray, positions, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn() against entries of `array`.

    The array is perturbed in place and restored; loss_fn must rebuild its
    forward pass from the current array contents on every call.
    """
    out = []
    flat = array.reshape(-1)
    for pos in positions:
        orig = flat[pos]
        flat[pos] = orig + h
        up = loss_fn()
        flat[pos] = orig - h
        down = loss_fn()
        flat[pos] = orig
        out.append((up - down) / (2.0 * h))
    return np.array(out)


def gradient_errors(loss_builder, store: T.ParamStore, rng: np.random.Generator,
                    points: int = 10, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and finite differences.

    Checks `points` random parameter entries spread over the whole store.
    Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator so
    near-zero gradients are held to a matching absolute bound.
    """
    loss = loss_builder()
    grads = T.backward(loss, store)
    entries = [(p.name, k) for p in store.parameters() for k in range(p.tensor.data.size)]
    chosen = [entries[i] for i in rng.choice(len(entries), size=min(points, len(entries)), replace=False)]
    worst = 0.0
    for name, pos in chosen:
        analytic = grads[name].data.reshape(-1)[pos]
        numeric = numeric_gradient(lambda: loss_builder().item(), store.array(name), [pos], h=h)[0]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, err)
    return worst


def check_gradients(loss_builder, store, seed: int = 0, points: int = 10, tol: float = 1e-4):
    rng = np.random.default_rng(seed)
    worst = gradient_errors(loss_builder, store, rng, points=points)
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
