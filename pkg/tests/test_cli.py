import io
import subprocess
import sys

import pytest

from medformer.cli import main
from medformer.config import RunConfig, parse_value, read_config_file, resolve
from medformer.errors import ConfigError

TINY = ["--d-model", "8", "--n-layers", "1", "--d-ff", "16", "--n-heads", "2", "--patch-len", "4,8",
        "--max-epochs", "3", "--patience", "2", "--lr", "1e-3", "--dropout", "0.1"]


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.mtsd"
    code, _, err = run("synth", "--out", path, "--n-subjects", 6, "--samples-per-subject", 10,
                       "--seq-len", 16, "--channels", 2, "--seed", 3)
    assert code == 0, err
    return path


def test_synth_is_deterministic(tmp_path, dataset):
    again = tmp_path / "again.mtsd"
    run("synth", "--out", again, "--n-subjects", 6, "--samples-per-subject", 10, "--seq-len", 16,
        "--channels", 2, "--seed", 3)
    assert again.read_bytes() == dataset.read_bytes()


def test_train_writes_artifacts_and_eval_reproduces(tmp_path, dataset):
    code, out, err = run("train", "--dataset", dataset, "--outdir", tmp_path, "--run-id", "r1",
                         "--seeds", "7", *TINY)
    assert code == 0, err
    run_dir = tmp_path / "r1"
    assert {p.name for p in run_dir.iterdir()} == {"resolved.config", "checkpoint.bin",
                                                   "runlog.csv", "metrics.tsv"}
    assert "summary (1 seed(s))" in out
    logged = (run_dir / "metrics.tsv").read_text().splitlines()
    assert logged[0].split("\t") == ["seed", "accuracy", "precision", "recall", "f1", "auroc", "auprc"]

    code, out, err = run("eval", "--checkpoint", run_dir / "checkpoint.bin")
    assert code == 0, err
    assert out.splitlines()[1].split("\t") == logged[1].split("\t")[1:]


def test_resolved_config_reproduces_run(tmp_path, dataset):
    code, _, err = run("train", "--dataset", dataset, "--outdir", tmp_path, "--run-id", "a", *TINY)
    assert code == 0, err
    first = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    code, _, err = run("train", "--config", tmp_path / "a" / "resolved.config")
    assert code == 0, err
    second = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    assert first == second


def test_seed_list_summary(tmp_path, dataset):
    code, out, err = run("train", "--dataset", dataset, "--outdir", tmp_path, "--run-id", "s",
                         "--seeds", "41,42", *TINY)
    assert code == 0, err
    rows = (tmp_path / "s" / "metrics.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["seed", "41", "42", "mean", "std"]
    assert (tmp_path / "s" / "seed41" / "checkpoint.bin").is_file()
    assert "±" in out.splitlines()[-2]


def test_parallel_seeds_match_sequential(tmp_path, dataset):
    args = ["train", "--dataset", dataset, "--outdir", tmp_path, "--seeds", "1,2", *TINY]
    assert run(*args, "--run-id", "seq")[0] == 0
    assert run(*args, "--run-id", "par", "--jobs", "2")[0] == 0
    assert (tmp_path / "seq" / "metrics.tsv").read_bytes() == (tmp_path / "par" / "metrics.tsv").read_bytes()


def test_missing_dataset_is_usage_error(tmp_path):
    out_dir = tmp_path / "out"
    code, _, err = run("train", "--dataset", tmp_path / "nope.mtsd", "--outdir", out_dir)
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: ConfigError:")
    assert not out_dir.exists()


@pytest.mark.parametrize("argv", [
    ["train", "--lr", "fast"],
    ["train", "--aug", "blur0.1"],
    ["train", "--variant", "tiny"],
    ["frobnicate"],
    ["eval"],
])
def test_bad_arguments_exit_2_on_one_line(argv):
    code, out, err = run(*argv)
    assert code == 2 and err.count("\n") == 1 and err.startswith("error:")


def test_corrupt_checkpoint_and_divergence(tmp_path, dataset):
    bad = tmp_path / "checkpoint.bin"
    bad.write_bytes(b"garbage")
    (tmp_path / "resolved.config").write_text(f"dataset={dataset}\n")
    code, _, err = run("eval", "--checkpoint", bad)
    assert code == 2 and "FormatError" in err
    code, _, err = run("train", "--dataset", dataset, "--outdir", tmp_path, "--patch-len", "64",
                       "--max-epochs", "1", "--patience", "1", "--d-model", "8", "--n-heads", "2",
                       "--n-layers", "1", "--d-ff", "8", "--lr", "1e30")
    assert code in (0, 1)
    if code == 1:
        assert err.startswith("error: TrainingDiverged")


def test_ablate_table(tmp_path, dataset):
    code, out, err = run("ablate", "--dataset", dataset, "--outdir", tmp_path, "--run-id", "ab",
                         *TINY, "--max-epochs", "1", "--patience", "1")
    assert code == 0, err
    rows = (tmp_path / "ab" / "ablation.tsv").read_text().splitlines()
    assert len(rows) == 5
    header = rows[0].split("\t")
    assert len(header) == 13 and header[1:3] == ["accuracy", "accuracy_std"]
    assert [r.split("\t")[0] for r in rows[1:]] == ["full", "no_inter_attention", "no_augmentation",
                                                     "single_channel_patching"]


def test_bench_rows(tmp_path):
    code, out, err = run("bench", "--outdir", tmp_path, "--run-id", "b", "--seq-lens", "32,64",
                         "--repeats", "1", "--warmup", "0", "--d-model", "8")
    assert code == 0, err
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2
    assert (tmp_path / "b" / "resolved.config").is_file()


def test_writes_stay_inside_outdir(tmp_path, dataset, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run("train", "--dataset", dataset, "--outdir", "out", *TINY)
    assert [p.name for p in tmp_path.iterdir()] == ["out"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "run.config"
    cfg_path.write_text("# comment\npatch-len = 8,8,8,16,16,16\naug = none,mask0.25\nlr = 0.01\n"
                        "val_subjects =\n")
    cfg = resolve(read_config_file(cfg_path), {"lr": "0.5", "seeds": "41,42,43,44,45"})
    assert cfg.patch_len == (8, 8, 8, 16, 16, 16)
    assert cfg.aug == ("none", "mask0.25")
    assert cfg.lr == 0.5 and cfg.seeds == (41, 42, 43, 44, 45) and cfg.val_subjects is None
    assert cfg.model_config(256, 33, 2).granularity.patch_counts == (32, 32, 32, 16, 16, 16)
    text = cfg.dumps()
    (tmp_path / "again.config").write_text(text)
    assert resolve(read_config_file(tmp_path / "again.config")) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_value("bogus", "1")
    with pytest.raises(ConfigError):
        parse_value("scale", "maybe")
    bad = tmp_path / "bad.config"
    bad.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    with pytest.raises(ConfigError):
        RunConfig(seeds=())
    with pytest.raises(ConfigError):
        RunConfig(patience=50, max_epochs=10)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "medformer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
