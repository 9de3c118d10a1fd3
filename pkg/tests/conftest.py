from __future__ import annotations

import numpy as np
import pytest

from csemchan import swf

LAMBDA = 0.01
K_PAPER = 2 * np.pi / LAMBDA


@pytest.fixture(scope="session")
def reference_operator():
    """Source radius 2 wavelengths, receive radius 20 wavelengths, 10 m apart, 30 GHz."""
    g = swf.Geometry(2 * LAMBDA, 20 * LAMBDA, 10.0)
    return swf.normalize_modes(g, K_PAPER)


@pytest.fixture(scope="session")
def small_operator():
    """Unit-wavelength toy geometry that keeps quadratures cheap."""
    g = swf.Geometry(0.5, 1.0, 4.0)
    return swf.normalize_modes(g, 2 * np.pi, n_trunc=8)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def points_in_ball(rng, n, center, radius):
    return np.asarray(center) + random_unit(rng, n) * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)


@pytest.fixture(scope="session")
def shell_operator():
    """Source radius 2 wavelengths with a concentric receive shell 10 m out."""
    g = swf.Geometry(2 * LAMBDA, 20 * LAMBDA, 10.0, rx_kind="shell")
    return swf.normalize_modes(g, K_PAPER)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when the acceptance module ran."""
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(results):
        parts = results[crit]
        ok = all(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}")
        for part, good, detail in parts:
            terminalreporter.write_line(f"    [{'PASS' if good else 'FAIL'}] {part}: {detail}")
