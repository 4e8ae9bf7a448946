import csv
import json
import os

import pytest

from promptpsi import cli, pipeline
from promptpsi.config import ConfigError, dump_config, load_config, parse_config
from promptpsi.irs import read_dataset
from promptpsi.modelio import load_model
from promptpsi.training import NumericError

TINY = """
[run]
seed = 3

[system]
rows = 8
cols = 8

[codec]
d_model = 16
d_p = 16
latent_hidden = 32
dec_hidden = 32

[data]
samples_per_task = 60
adapt_samples = 40

[train]
epochs = 2
episodes = 12
support_size = 8
query_size = 8
"""


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    home = root / "home"
    for cmd in (["gen-data"], ["train"], ["train-baseline"], ["adapt", "--support-size", 8], ["eval"]):
        assert _run(*cmd, "--config", cfg, "--home", home, "-q") == 0, cmd
    return cfg, home


def test_gen_data_outputs(run_dir):
    cfg, home = run_dir
    files = sorted(os.listdir(home / "data"))
    assert len([f for f in files if f.startswith("cr")]) == 12
    man = json.load(open(home / "data" / "manifest.json"))
    assert len(man["files"]) == 12
    assert man["seed"] == 3


def test_gen_data_refuses_overwrite(run_dir):
    cfg, home = run_dir
    with pytest.raises(SystemExit) as exc:
        _run("gen-data", "--config", cfg, "--home", home, "-q")
    assert exc.value.code == 2


def test_same_seed_same_manifest(tmp_path, run_dir):
    cfg, _ = run_dir
    for d in ("a", "b"):
        assert _run("gen-data", "--config", cfg, "--home", tmp_path / d, "--seed", 7, "-q") == 0
    a = json.load(open(tmp_path / "a" / "data" / "manifest.json"))
    b = json.load(open(tmp_path / "b" / "data" / "manifest.json"))
    assert a == b
    assert a["seed"] == 7


def test_workers_do_not_change_data(tmp_path, run_dir):
    cfg, home = run_dir
    assert _run("gen-data", "--config", cfg, "--home", tmp_path, "--workers", 2, "-q") == 0
    assert (open(tmp_path / "data" / "manifest.json").read()
            == open(home / "data" / "manifest.json").read())


def test_invalid_channel_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[grid]\nchannels = LoS, Rayleigh\n")
    with pytest.raises(SystemExit) as exc:
        _run("gen-data", "--config", bad, "--home", tmp_path, "-q")
    assert exc.value.code == 2


def test_missing_datasets_exit_3(tmp_path, run_dir, capsys):
    cfg, home = run_dir
    assert _run("train", "--config", cfg, "--home", tmp_path / "empty", "-q") == 3
    (tmp_path / "h").mkdir()
    assert _run("gen-data", "--config", cfg, "--home", tmp_path / "h", "-q") == 0
    os.remove(tmp_path / "h" / "data" / "cr0.5_snr15_LoS.psid")
    capsys.readouterr()
    assert _run("train", "--config", cfg, "--home", tmp_path / "h", "-q") == 3
    assert "cr0.5_snr15_LoS" in capsys.readouterr().err


def test_numeric_failure_exit_4(monkeypatch, run_dir, tmp_path):
    cfg, home = run_dir

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(pipeline, "train_base", boom)
    assert _run("train", "--config", cfg, "--home", home, "-q") == 4


def test_resume_reproduces_uninterrupted_model(tmp_path, run_dir):
    cfg, home = run_dir
    h = tmp_path / "resume"
    assert _run("gen-data", "--config", cfg, "--home", h, "-q") == 0
    assert _run("train", "--config", cfg, "--home", h, "--stop-after", 1, "-q") == 0
    assert not (h / "models" / "prompt.psic").exists()
    assert _run("train", "--config", cfg, "--home", h, "-q") == 0
    assert (h / "models" / "prompt.psic").read_bytes() == (home / "models" / "prompt.psic").read_bytes()
    assert (h / "logs" / "train.csv").read_bytes() == (home / "logs" / "train.csv").read_bytes()


def test_training_log_columns(run_dir):
    _, home = run_dir
    rows = list(csv.DictReader(open(home / "logs" / "train.csv")))
    assert list(rows[0]) == pipeline.LOG_COLUMNS
    assert {r["phase"] for r in rows} == {"base", "episodic"}


def test_baseline_warns_about_ignored_grid(run_dir, capsys):
    cfg, home = run_dir
    assert _run("train-baseline", "--config", cfg, "--home", home, "--force", "-q") == 0
    assert "ignoring 11 other grid task(s)" in capsys.readouterr().err


def test_adapt_rejections(run_dir):
    cfg, home = run_dir
    for extra in (["--support-size", 0], ["--task", "0.25,15,NLoS"], ["--task", "0.25,12,Rayleigh"]):
        with pytest.raises(SystemExit) as exc:
            _run("adapt", "--config", cfg, "--home", home, "-q", *extra)
        assert exc.value.code == 2


def test_adapt_report_and_bank(run_dir):
    cfg, home = run_dir
    rep = json.load(open(home / "reports" / "adapt.json"))
    assert rep["task"] == [0.25, 12.0, "NLoS"]
    assert rep["support_size"] == 8
    _, bank, _, _ = load_model(home / "models" / "adapted.psic")
    assert len(bank) == 13


def test_eval_default_grid(run_dir):
    _, home = run_dir
    rows = list(csv.reader(open(home / "reports" / "report.csv")))
    assert len(rows) == 12 * 2 + 1


def test_eval_fig4a_json_and_adapted_bank(run_dir, tmp_path):
    cfg, home = run_dir
    out = tmp_path / "r.json"
    assert _run("eval", "--config", cfg, "--home", home, "--grid", "fig4a", "--format", "json",
                "--models", "adapted,baseline", "--out", out, "-q") == 0
    obj = json.load(open(out))
    assert len(obj["cells"]) == 3 * 2
    assert {c["model"] for c in obj["cells"]} == {"adapted", "baseline"}


def test_eval_missing_data(run_dir, tmp_path):
    cfg, home = run_dir
    import shutil
    h = tmp_path / "partial"
    shutil.copytree(home, h)
    os.remove(h / "data" / "cr0.125_snr15_NLoS.psid")
    assert _run("eval", "--config", cfg, "--home", h, "-q") == 3
    assert _run("eval", "--config", cfg, "--home", h, "--allow-partial", "-q") == 0


def test_artifacts_share_digest(run_dir):
    cfg, home = run_dir
    digest = load_config(cfg).digest()
    assert json.load(open(home / "data" / "manifest.json"))["config_digest"] == digest
    assert read_dataset(home / "data" / "cr0.25_snr15_NLoS.psid").config_digest == digest
    for m in ("prompt", "baseline", "adapted"):
        assert load_model(home / "models" / f"{m}.psic")[2]["config_digest"] == digest
    assert json.load(open(home / "reports" / "report.csv.meta.json"))["config_digest"] == digest
    assert json.load(open(home / "reports" / "adapt.json"))["config_digest"] == digest


def test_psi_home_env(monkeypatch, tmp_path, run_dir):
    cfg, _ = run_dir
    monkeypatch.setenv("PSI_HOME", str(tmp_path / "envhome"))
    assert _run("gen-data", "--config", cfg, "-q") == 0
    assert (tmp_path / "envhome" / "data" / "manifest.json").exists()


# -- config file -------------------------------------------------------------------

def test_config_roundtrip_and_seed_override():
    cfg = parse_config(TINY)
    assert parse_config(dump_config(cfg)) == cfg
    assert load_config(None, seed=9).train.seed == 9


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[train]\nepochz = 3\n", "[train]\nepochs = many\n",
                                  "[system]\nrows = 16\n[codec]\nrows = 8\n", "not a config"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)
