import pytest
import torch

from foodseg.dataset import generate_toy_dataset, generate_toy_image_folder, load_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(root, seed=1, n_images=8, n_classes=5, size=64)
    return root


@pytest.fixture(scope="session")
def toy_train(toy_root):
    return load_dataset(toy_root, "train")


@pytest.fixture(scope="session")
def toy_folder(tmp_path_factory):
    root = tmp_path_factory.mktemp("folder")
    items = generate_toy_image_folder(root, seed=0, n_per_class=16, n_classes=3, size=32)
    return root, items


_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["ran"] else ("FAIL" if not entry["ok"] else "SKIP")
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}")
