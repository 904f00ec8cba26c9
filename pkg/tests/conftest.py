from __future__ import annotations

import os

# single-threaded BLAS: timings and bitwise determinism assume one thread
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest

from dear.engine import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(build, inputs: dict[str, np.ndarray], tol: float = 1e-4, eps: float = 1e-4, probe=None) -> float:
    """Compare analytic and numeric gradients of ``sum(probe * build(**tensors))``.

    ``build`` maps named Tensors to an output Tensor; ``probe`` is a fixed random
    projection turning non-scalar outputs into a scalar. Returns the worst
    relative error over all inputs and asserts it is below ``tol``.
    """
    rng = np.random.default_rng(1234)
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    out = build(**tensors)
    if probe is None:
        probe = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    from dear import engine as E

    E.sum_all(E.mul(out, Tensor(probe))).backward()
    worst = 0.0
    for name, t in tensors.items():

        def f(v, name=name):
            args = {k: Tensor(np.array(inputs[k], dtype=np.float64)) for k in inputs}
            args[name] = Tensor(v)
            return float(np.sum(build(**args).data * probe))

        num = numeric_grad(f, inputs[name], eps)
        err = rel_error(t.grad, num)
        worst = max(worst, err)
        assert err < tol, f"gradient of {name}: relative error {err:.2e} >= {tol:.0e}"
    return worst


def check_param_grads(params: dict, names, loss_fn, tol: float = 1e-4) -> float:
    """Finite-difference check of ``loss_fn()`` w.r.t. the named parameter tensors."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name in names:
        p = params[name]
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(v, p=p):
            p.data = v
            return loss_fn().item()

        numeric = numeric_grad(f, original)
        p.data = original
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"{name}: relative error {err:.2e} >= {tol:.0e}"
    return worst


# acceptance summary ----------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
