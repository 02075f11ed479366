import contextlib
import time

import pytest

from mvt import viewgen as V

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """The 6-class, 6-view 32x32 dataset with seed 7 (500/100/100 objects)."""
    out = tmp_path_factory.mktemp("toy") / "data"
    V.make_dataset(out, 7, {"train": 500, "val": 100, "test": 100})
    return V.load_dataset(out)


def first_train(ds, n: int):
    """Same dataset with only the first ``n`` training objects."""
    tr = ds["train"]
    head = V.Split("train", tr.views[:n], tr.labels[:n], tr.shape_ids[:n])
    return V.Dataset(ds.path, ds.manifest, {**ds.splits, "train": head})


class _Verdict:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c`` records one PASS/FAIL line for acceptance item n."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        v = _Verdict()
        t0 = time.perf_counter()
        ok = False
        try:
            yield v
            ok = True
        finally:
            secs = time.perf_counter() - t0
            extra = f"; {v.detail}" if v.detail else ""
            line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({secs:.1f}s{extra})"
            _VERDICTS.append(line)
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
