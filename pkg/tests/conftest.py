from __future__ import annotations

import numpy as np
import pytest
import torch

from gftab.tabular import generate_synthetic

torch.set_default_dtype(torch.float64)

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_gradient(f, x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    g = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = torch.as_tensor(a).reshape(-1)
    b = torch.as_tensor(b).reshape(-1)
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12))


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(400, 3, 3, 2, 2.0, seed=11)


# -- acceptance verdicts ---------------------------------------------------

N_CRITERIA = 12
VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    ran = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, []) if "test_acceptance" in r.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = VERDICTS.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
