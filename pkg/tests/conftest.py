import os
import shutil
import subprocess
from pathlib import Path

import pytest

from dgbench.data import save_mnist_idx
from dgbench.sources import mlxtend_digits, npm_mnist_digits

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for info in _criteria.values():
        if report.nodeid in info["nodes"]:
            info["outcomes"].append(report.outcome)
            info["values"].extend(report.user_properties)


def pytest_itemcollected(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        n, text = m.args
        _criteria.setdefault(n, {"text": text, "outcomes": [], "nodes": set(), "values": []})["nodes"].add(item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        info = _criteria[n]
        outcomes = info["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {info['text']}")
        if info["values"]:
            terminalreporter.write_line("              measured: " + ", ".join(f"{k}={v}" for k, v in info["values"]))


def _npm_tarball(cache: Path) -> Path | None:
    found = sorted(cache.glob("mnist-*.tgz"))
    if found:
        return found[-1]
    if shutil.which("npm") is None:
        return None
    try:
        subprocess.run(["npm", "pack", "mnist", "--silent"], cwd=cache, check=True, timeout=300,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    except (subprocess.SubprocessError, OSError):
        return None
    found = sorted(cache.glob("mnist-*.tgz"))
    return found[-1] if found else None


@pytest.fixture(scope="session")
def mnist_dir(request):
    """MNIST IDX directory.

    ``$DGBENCH_DATA`` if set; otherwise the 10,000 digits of the npm ``mnist``
    package (fetched once into the pytest cache); otherwise the 5,000 digits
    bundled with mlxtend.
    """
    env = os.environ.get("DGBENCH_DATA")
    if env and Path(env).exists():
        return Path(env)
    cache = Path(request.config.cache.mkdir("mnist"))
    if any(cache.glob("train-images-idx3-ubyte*")):
        return cache
    tarball = _npm_tarball(cache)
    if tarball is not None:
        images, labels = npm_mnist_digits(tarball)
    else:
        try:
            images, labels = mlxtend_digits()
        except FileNotFoundError:
            pytest.skip("no MNIST data: set DGBENCH_DATA, install npm, or install mlxtend")
    return save_mnist_idx(cache, images, labels)
