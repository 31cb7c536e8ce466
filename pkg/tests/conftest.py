import numpy as np

from ttdsr.autodiff import Tape


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(fn, tensors, seed=0, h=1e-5, max_coords=None):
    """Compare tape gradients of ``sum(fn() * R)`` against central differences.

    ``R`` is a fixed random projection of the output, so non-scalar outputs
    are checked without a reduction op. With ``max_coords`` only that many
    seeded-random entries per tensor are differenced. Returns the worst
    relative error.
    """
    with Tape() as tape:
        out = fn()
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=out.shape)
    for t in tensors:
        t.grad = None
    tape.backward(out, seed=proj)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.zeros(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = float(np.sum(fn().data * proj))
            flat[i] = orig - h
            down = float(np.sum(fn().data * proj))
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        worst = max(worst, rel_err(ga.reshape(-1)[coords], num))
    for t in tensors:
        t.grad = None
    return worst


# Pass/fail lines recorded by the acceptance suite, printed after the run.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, line = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {line}")
