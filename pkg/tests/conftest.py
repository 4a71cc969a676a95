import numpy as np
import pytest
import torch


def central_differences(fn, tensors, step=1e-5):
    """Numerical gradient of scalar fn() w.r.t. each tensor, perturbing entries in place."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = fn().item()
                flat[k] = orig - step
                down = fn().item()
                flat[k] = orig
                gflat[k] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def gradient_errors(fn, tensors, step=1e-5):
    """Relative error ||analytic - numeric|| / ||numeric|| per tensor."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    numeric = central_differences(fn, tensors, step)
    errs = []
    for a, n in zip(analytic, numeric):
        denom = max(float(n.norm()), 1e-8)
        errs.append(float((a - n).norm()) / denom)
    return errs


@pytest.fixture
def path_graph3():
    return np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
