"""Shared test helpers: finite-difference gradient oracles and tiny configs."""
import numpy as np

from docrel import tensorlib as tl


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. array x.

    f must read x by reference (we mutate entries in place and restore them),
    so the typical call is numeric_grad(lambda: forward().item(), param.data).
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, safe when both sides are (near) zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grad(make_loss, params, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare tape gradients of make_loss() against finite differences.

    `params` is a list of Tensors with requires_grad=True that make_loss
    reads. Returns the worst relative error across all of them.
    """
    with tl.Tape():
        loss = make_loss()
        grads = tl.backward(loss)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        numeric = numeric_grad(lambda: make_loss().item(), p.data, h=h)
        err = rel_err(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} (tol {tol:.0e}) for shape {p.shape}"
    return worst
