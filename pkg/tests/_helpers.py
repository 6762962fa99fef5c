"""Finite-difference gradient checking shared by the test modules."""
import numpy as np

from mamba_moc import autograd as ag


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    for idx in (indices if indices is not None else np.ndindex(arr.shape)):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_gradients(build, tensors, h: float = 1e-6, rtol: float = 1e-5, atol: float = 1e-8):
    """Compare tape gradients of scalar ``build()`` against central differences.

    Runs in float64; ``tensors`` must be leaf Tensors with requires_grad.
    ``h`` may be a list giving one step per tensor.
    """
    steps = h if isinstance(h, (list, tuple)) else [h] * len(tensors)
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward()
    analytic = [np.array(t.grad) for t in tensors]

    def value():
        with ag.no_grad():
            return build().item()

    for t, g, step in zip(tensors, analytic, steps):
        num = numeric_grad(value, t.data, step)
        np.testing.assert_allclose(g, num, rtol=rtol, atol=atol)


def random_projection(rng, shape):
    """Fixed random weights so that sum(w * y) exercises every output element."""
    return rng.normal(size=shape)


ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False
