import numpy as np
import pytest
import torch

from dtlpnet.config import TrainConfig
from dtlpnet.data import DataConfig, DomainTransform, generate_dataset
from dtlpnet.network import ModelConfig


@pytest.fixture(autouse=True)
def _quiet_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 volumes of 16^3 over two domains: train has 4 labeled + 4 unlabeled, test has 4."""
    out = tmp_path_factory.mktemp("small_data")
    cfg = DataConfig(num_classes=3, shape=(16, 16, 16), num_samples=12,
                     domains=[DomainTransform(), DomainTransform(gamma=1.4, noise_sigma=0.05)],
                     test_domain=None, test_fraction=4 / 12, labeled_fraction=0.5)
    manifest = generate_dataset(cfg, seed=3, out_dir=out)
    return manifest


def tiny_train_config(tmp_path, **kw):
    base = dict(
        data_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "run"), max_iterations=4,
        base_width=2, num_stages=2, convs_per_stage=1, time_dim=4, corr_grid=2, corr_dim=4,
        diffusion_steps=50, ddim_steps=2, patch_size=2, drs_window=5, checkpoint_every=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_model_config(**kw):
    base = dict(num_classes=2, base_width=1, num_stages=2, convs_per_stage=1, time_dim=4,
                corr_grid=2, corr_dim=2)
    base.update(kw)
    return ModelConfig(**base)


# -- acceptance criteria report ------------------------------------------------------
# Tests marked ``criterion(n, title)`` are grouped by n; the terminal summary
# prints one PASS/FAIL line per criterion.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0, "notes": []})
    if rep.when == "call":
        entry["tests"] += 1
        detail = getattr(item, "criterion_detail", None)
        if detail:
            entry["notes"].append(detail)
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_deselected(items):
    # a criterion with deselected tests was not fully checked
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0, "notes": []})["partial"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "FAIL" if not e["ok"] else "PARTIAL" if e.get("partial") else "PASS"
        line = f"criterion {n:>2}: {status}  {e['title']} ({e['tests']} tests)"
        tr.write_line(line)
        for note in e["notes"]:
            tr.write_line(f"              {note}")
