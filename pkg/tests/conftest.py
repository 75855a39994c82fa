import numpy as np
import pytest

from hdrvam import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6, idx=None) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. ``x`` (in place, restored).

    ``idx`` restricts the probe to a list of flat indices; other entries stay nan.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in (range(flat.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def rel_err(a, n, floor: float = 1e-8) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_op_grad(op, arrays, seed: int, h: float = 1e-6):
    """Return relative errors comparing analytic and numeric grads of
    ``sum(r * op(*tensors))`` for every input array."""
    # the projection gets its own stream so it is independent of the inputs
    rng = np.random.default_rng([seed, 99])
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    r = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(r * op(*[ad.Tensor(t.data) for t in tensors]).data))

    loss = ad.sum_all(ad.multiply(out, ad.Tensor(r)))
    ad.backward(loss)
    errs = []
    for t in tensors:
        num = numeric_grad(scalar, t.data, h)
        errs.append(rel_err(t.grad, num).ravel())
    return np.concatenate(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
