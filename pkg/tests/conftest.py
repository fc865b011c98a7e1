import numpy as np
import pytest
import torch

from bidir_adapt.models import ArchConfig, Networks

MINI_SHAPE = (4, 4, 1)
MINI_ARCH = ArchConfig(noise_dim=2, gen_features=2, gen_blocks=1, disc_features=(2, 2),
                       clf_conv=(2, 2), clf_hidden=(2,))


@pytest.fixture
def mini_nets():
    """Six miniature float64 networks on 4x4 grayscale images, 3 classes."""
    torch.manual_seed(0)
    nets = Networks.build(MINI_SHAPE, 3, MINI_ARCH)
    for _, m in nets.items():
        m.double()
        # larger weights than the GAN init so every path carries a visible signal
        for p in m.parameters():
            if p.dim() > 1:
                torch.nn.init.normal_(p, std=0.5)
    return nets


@pytest.fixture
def mini_batch():
    g = torch.Generator().manual_seed(1)
    x_s = torch.rand(3, 1, 4, 4, generator=g, dtype=torch.float64) - 0.5
    x_t = torch.rand(3, 1, 4, 4, generator=g, dtype=torch.float64) - 0.5
    z_s = torch.randn(3, 2, generator=g, dtype=torch.float64)
    z_t = torch.randn(3, 2, generator=g, dtype=torch.float64)
    y_s = torch.tensor([0, 2, 1])
    return x_s, x_t, z_s, z_t, y_s


def finite_difference_grads(fn, params, h=1e-6):
    """Central differences of the scalar ``fn()`` with respect to every element of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def assert_grads_match(fn, modules, rtol=1e-3, h=1e-6):
    """Autograd gradients of ``fn()`` w.r.t. the modules' parameters vs central differences.

    BatchNorm running statistics are restored after every forward so the check
    runs on a fixed function. The absolute floor is the float64 roundoff of the
    difference quotient, which matters only for gradients that are exactly zero.
    """
    params = [p for m in modules for p in m.parameters()]
    buffers = [b for m in modules for b in m.buffers()]
    saved = [b.clone() for b in buffers]

    def restore():
        for b, s in zip(buffers, saved):
            b.copy_(s)

    def wrapped():
        out = fn()
        restore()
        return out

    for p in params:
        p.grad = None
    out = fn()
    atol = 100 * np.finfo(np.float64).eps * max(1.0, abs(out.item())) / h
    out.backward()
    restore()
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    numeric = finite_difference_grads(wrapped, params, h)
    total = 0
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a.numpy(), n.numpy(), rtol=rtol, atol=atol)
        total += a.numel()
    assert total > 0
    return analytic


# ---- acceptance summary: one pass/fail line per criterion at the end of the run

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title, self.detail = lines, number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        why = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"criterion {self.number} [{self.title}]: {'PASS' if ok else 'FAIL'}  {why}".rstrip()
        self.lines[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records PASS, or FAIL with the error, for criterion ``n``."""
    lines = request.config.stash[ACCEPTANCE_KEY]
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
