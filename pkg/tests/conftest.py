import numpy as np
import pytest

from emsynth.volume_io import DensityVolume


def gaussian_blob(d, sigma, center=None, amplitude=1.0):
    """Isotropic Gaussian sampled on a d^3 grid; center in (x, y, z) index units."""
    c = np.full(3, d // 2, dtype=float) if center is None else np.asarray(center, dtype=float)
    z, y, x = np.mgrid[0:d, 0:d, 0:d].astype(float)
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
    return amplitude * np.exp(-r2 / (2 * sigma ** 2))


def asymmetric_phantom(d=32):
    """Three blobs of different sizes; no rotational symmetry."""
    vol = gaussian_blob(d, d / 10)
    vol += 0.7 * gaussian_blob(d, d / 16, center=(d // 2 + d / 5, d // 2, d // 2 - d / 8))
    vol += 0.4 * gaussian_blob(d, d / 20, center=(d // 2 - d / 8, d // 2 + d / 5, d // 2))
    return DensityVolume(vol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def phantom32():
    return asymmetric_phantom(32)


def shell_phantom(d=64):
    """Blurred spherical shell plus two off-center balls (no symmetry beyond the shell)."""
    from scipy import ndimage

    c = d // 2
    z, y, x = np.mgrid[0:d, 0:d, 0:d].astype(float) - c
    r = np.sqrt(x ** 2 + y ** 2 + z ** 2)
    s = d / 64
    vol = ((r >= 14 * s) & (r <= 18 * s)).astype(float)
    vol += (np.sqrt((x - 6 * s) ** 2 + y ** 2 + (z + 3 * s) ** 2) <= 5 * s) * 1.5
    vol += (np.sqrt(x ** 2 + (y + 7 * s) ** 2 + (z - 4 * s) ** 2) <= 3 * s) * 2.0
    return DensityVolume(ndimage.gaussian_filter(vol, 1.0))


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request, capsys):
    """Call ``criterion(n, title, ok, detail)`` to record and print one verdict line."""

    def report(n, title, ok, detail=""):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        request.config._acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report
