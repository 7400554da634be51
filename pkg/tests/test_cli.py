import csv
from dataclasses import fields

import numpy as np
import pytest

from dtlpnet.cli import run
from dtlpnet.config import TrainConfig, dump_toml
from dtlpnet.data import DataConfig, DatasetManifest, DomainTransform, SplitSpec, write_raw

TINY = dict(base_width=2, num_stages=2, convs_per_stage=1, time_dim=4, corr_grid=2, corr_dim=4,
            diffusion_steps=50, ddim_steps=2, patch_size=2, max_iterations=3)


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.toml").write_text(
        "[data]\nshape = [16, 16, 16]\nnum_samples = 8\ntest_domain = -1\ntest_fraction = 0.25\n"
        "labeled_fraction = 0.5\n")
    assert run(["generate-data", "--config", str(root / "data.toml"), "--seed", "7", "--out", str(root / "d")]) == 0
    return root


def _train_toml(path, data, out, **kw):
    path.write_text("[train]\n" + dump_toml({"data_dir": str(data), "output_dir": str(out), **TINY, **kw}))
    return path


def test_usage_errors(capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["train", "--config", "x.toml", "--bogus"]) == 1
    assert run(["ablate", "--config", "x.toml"]) == 1


def test_help_documents_every_config_key(capsys):
    assert run(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for f in fields(TrainConfig):
        assert f.name in out
    assert run(["generate-data", "--help"]) == 0
    out = capsys.readouterr().out
    for f in fields(DataConfig):
        assert f.name in out


def test_missing_files_exit_3(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "nope.toml")]) == 3
    assert "nope.toml" in capsys.readouterr().err
    cfg = _train_toml(tmp_path / "c.toml", tmp_path / "no_data", tmp_path / "run")
    assert run(["train", "--config", str(cfg)]) == 3
    assert "no_data" in capsys.readouterr().err


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("lr = -1.0\nwhat_is_this = 3\nepochs = 'many'\n")
    assert run(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "what_is_this" in err and "epochs" in err
    bad.write_text("[data]\nshape = [20, 16, 16]\n")
    assert run(["generate-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_generate_train_eval_report(cli_data, tmp_path):
    d = cli_data / "d"
    m = DatasetManifest.load(d)
    assert len(m.samples) == 8
    cfg = _train_toml(tmp_path / "c.toml", d, tmp_path / "run")
    assert run(["train", "--config", str(cfg), "--seed", "3"]) == 0
    ck = sorted((tmp_path / "run").glob("checkpoint_*.pt"))
    assert [p.name for p in ck] == ["checkpoint_000003.pt"]
    assert run(["eval", "--checkpoint", str(ck[0]), "--split", "test", "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert run(["eval", "--checkpoint", str(tmp_path / "run" / "inference.pt")]) == 1
    assert run(["eval", "--checkpoint", str(tmp_path / "run" / "inference.pt"), "--data", str(d),
                "--out", str(tmp_path / "ev")]) == 0
    assert run(["report", "--runs", str(tmp_path / "run"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.csv").exists() and (tmp_path / "rep" / "losses.png").exists()
    assert run(["report", "--runs", str(tmp_path / "missing"), "--out", str(tmp_path / "rep2")]) == 3
    assert not (tmp_path / "rep2").exists()


def test_train_reproducible_under_seed(cli_data, tmp_path):
    d = cli_data / "d"
    for name in ("a", "b"):
        cfg = _train_toml(tmp_path / f"{name}.toml", d, tmp_path / name)
        assert run(["train", "--config", str(cfg), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_ablate_two_toggles_four_rows(cli_data, tmp_path):
    cfg = _train_toml(tmp_path / "c.toml", cli_data / "d", tmp_path / "base", max_iterations=2)
    assert run(["ablate", "--config", str(cfg), "--grid", "mic,kd", "--out", str(tmp_path / "abl")]) == 0
    with open(tmp_path / "abl" / "ablation_summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert {(r["mic"], r["kd"]) for r in rows} == {("1", "1"), ("1", "0"), ("0", "1"), ("0", "0")}
    assert all(np.isfinite(float(r["final_total_loss"])) for r in rows)
    assert run(["ablate", "--config", str(cfg), "--grid", "mic,nonsense"]) == 1


def test_output_root_env(cli_data, tmp_path, monkeypatch):
    monkeypatch.setenv("DTLP_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run(["generate-data", "--config", str(cli_data / "data.toml"), "--out", "rel"]) == 0
    assert (tmp_path / "root" / "rel" / "manifest.json").exists()


def test_generate_data_reproducible(cli_data, tmp_path):
    assert run(["generate-data", "--config", str(cli_data / "data.toml"), "--seed", "7", "--out", str(tmp_path)]) == 0
    for p in (cli_data / "d").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_untrained_eval_is_chance_level(tmp_path, capsys):
    """Balanced labels (three equal slabs) with label-independent noise images.

    An untrained model's output is then independent of the labels, so the
    expected Dice of class k is 2 q_k g_k / (q_k + g_k) with predicted share
    q_k and true share g_k = 1/K. Averaged over classes this is at most 1/K.
    """
    from dtlpnet.training import build_state, export_inference

    K, shape = 3, (48, 16, 16)
    rng = np.random.default_rng(0)
    label = np.repeat(np.arange(K), 16)[:, None, None] * np.ones(shape, np.uint8)
    samples = {}
    for i in range(4):
        sid = f"s{i}"
        write_raw(tmp_path / f"{sid}_img.raw", rng.random(shape), "<f4")
        write_raw(tmp_path / f"{sid}_lab.raw", label, "u1")
        samples[sid] = {"domain": 0, "image": f"{sid}_img.raw", "label": f"{sid}_lab.raw"}
    DatasetManifest(K, shape, {"test": SplitSpec(list(samples), [])}, [DomainTransform()], 0, samples).save(tmp_path)

    cfg = TrainConfig(output_dir=str(tmp_path / "run"), **{k: v for k, v in TINY.items() if k != "max_iterations"})
    export = export_inference(build_state(cfg, K, 1), tmp_path / "untrained.pt")
    assert run(["eval", "--checkpoint", str(export), "--data", str(tmp_path), "--out", str(tmp_path / "ev")]) == 0
    with open(tmp_path / "ev" / "metrics.csv") as f:
        rows = list(csv.DictReader(f))

    from dtlpnet.evaluation import infer, load_inference

    model = load_inference(export)
    per_class = np.zeros(K)
    chance = np.zeros(K)
    for sid in samples:
        x = np.fromfile(tmp_path / f"{sid}_img.raw", "<f4").reshape(shape)
        q = np.bincount(infer(x, model).ravel(), minlength=K) / np.prod(shape)
        chance += 2 * q / K / (q + 1 / K)
        per_class += [float(r["dice"]) for r in rows if r["sample_id"] == sid]
    per_class /= len(samples)
    chance /= len(samples)
    assert np.abs(per_class - chance).max() <= 0.05
    assert per_class.mean() <= 1 / K + 0.02
