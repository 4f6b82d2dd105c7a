import hashlib
import json
import os
import subprocess
import sys

import pytest

from rgbt_decouple.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from rgbt_decouple.data import load_corpus

TINY = ["--n-train", "8", "--n-test", "4", "--height", "16", "--width", "16"]


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["gen-data", "--out-dir", str(root), *TINY]) == EXIT_OK
    data = root / "data" / "corpus.rtfc"
    assert main(["train", "--out-dir", str(root), "--data", str(data), "--epochs", "2"]) == EXIT_OK
    return root, data


def test_gen_data_default_layout(runs):
    root, data = runs
    assert load_corpus(data).spec.n_train == 8
    assert (root / "data" / "config.echo").exists()
    assert "height: 16" in (root / "data" / "spec.txt").read_text()


def test_gen_data_is_deterministic(tmp_path):
    for rid in ("a", "b"):
        assert main(["gen-data", "--out-dir", str(tmp_path), "--run-id", rid, *TINY]) == EXIT_OK
    assert _sha(tmp_path / "a" / "corpus.rtfc") == _sha(tmp_path / "b" / "corpus.rtfc")


def test_gen_data_rejects_bad_height_before_generating(tmp_path, capsys):
    assert main(["gen-data", "--out-dir", str(tmp_path), "--height", "30"]) == EXIT_USAGE
    assert "divisible" in capsys.readouterr().err
    assert not (tmp_path / "data").exists()


def test_unwritable_output_is_a_data_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out-dir", str(blocker), *TINY]) == EXIT_DATA


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--data", "x", "--bogus"]) == EXIT_USAGE


def test_missing_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_train_layout_and_defaults(runs):
    root, _ = runs
    out = root / "train"
    for name in ("config.echo", "bundle.rtfd", "epochs.csv"):
        assert (out / name).exists()
    echo = json.loads((out / "config.echo").read_text())
    assert (echo["lambda_cmdr"], echo["lambda_rdr"], echo["lambda_ce"], echo["seed"]) == (0.5, 1.0, 1.0, 0)
    assert echo["batch_size"] == 4
    lines = (out / "epochs.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_ce_fuse,l_ce_rgb,l_ce_t,l_cmdr,l_rdr,l_total"
    assert len(lines) == 3


def test_train_rerun_identical_csv(runs, tmp_path):
    root, data = runs
    assert main(["train", "--out-dir", str(tmp_path), "--data", str(data), "--epochs", "2"]) == EXIT_OK
    assert _sha(tmp_path / "train" / "epochs.csv") == _sha(root / "train" / "epochs.csv")
    assert _sha(tmp_path / "train" / "bundle.rtfd") == _sha(root / "train" / "bundle.rtfd")


def test_train_zero_regularisers(runs, tmp_path):
    _, data = runs
    args = ["train", "--out-dir", str(tmp_path), "--data", str(data), "--epochs", "2",
            "--lambda-cmdr", "0", "--lambda-rdr", "0"]
    assert main(args) == EXIT_OK
    rows = [line.split(",") for line in (tmp_path / "train" / "epochs.csv").read_text().splitlines()[1:]]
    assert all(float(r[4]) == 0.0 and float(r[5]) == 0.0 for r in rows)
    assert all(float(r[6]) == pytest.approx(float(r[1]) + float(r[2]) + float(r[3]), rel=1e-12) for r in rows)


def test_config_echo_round_trips(runs, tmp_path):
    root, _ = runs
    echo = root / "train" / "config.echo"
    args = ["train", "--config", str(echo), "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert _sha(tmp_path / "train" / "epochs.csv") == _sha(root / "train" / "epochs.csv")
    again = json.loads((tmp_path / "train" / "config.echo").read_text())
    first = json.loads(echo.read_text())
    assert {k: v for k, v in again.items() if k != "out_dir"} == {k: v for k, v in first.items() if k != "out_dir"}


def test_config_for_other_command_rejected(runs, tmp_path):
    root, _ = runs
    assert main(["eval", "--config", str(root / "train" / "config.echo"), "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_config_with_unknown_key_rejected(tmp_path):
    bad = tmp_path / "c.echo"
    bad.write_text(json.dumps({"command": "train", "data": "x", "colour": "red"}))
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE


def test_train_missing_corpus_is_data_error(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path), "--data", str(tmp_path / "none.rtfc")]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_train_incompatible_shapes_is_data_error(runs, tmp_path):
    _, data = runs
    args = ["train", "--out-dir", str(tmp_path), "--data", str(data), "--widths", "4,4,4,4,4"]
    assert main(args) == EXIT_DATA


def test_train_non_finite_loss_exit_code(runs, tmp_path, capsys):
    _, data = runs
    args = ["train", "--out-dir", str(tmp_path), "--data", str(data), "--epochs", "3",
            "--lr-encoder", "1e12", "--lr-decoder", "1e12"]
    with pytest.warns(RuntimeWarning):
        assert main(args) == 3
    assert "non-finite" in capsys.readouterr().err


def _eval(root, data, tmp_path, cond, run_id):
    bundle = root / "train" / "bundle.rtfd"
    return main(["eval", "--out-dir", str(tmp_path), "--run-id", run_id, "--data", str(data),
                 "--bundle", str(bundle), "--condition", cond])


def test_eval_rgbt_report_schema(runs, tmp_path, capsys):
    root, data = runs
    assert _eval(root, data, tmp_path, "rgbt", "e") == EXIT_OK
    lines = (tmp_path / "e" / "report-rgbt.csv").read_text().splitlines()
    assert lines[0] == "condition,branch,class,iou,acc,support"
    assert [l.split(",")[2] for l in lines[1:]] == ["0", "1", "2", "3", "mean"]


@pytest.mark.parametrize("cond,groups", [("rgb", "rgb_encoder, rgb_decoder"), ("t", "t_encoder, t_decoder")])
def test_eval_unimodal_reads_only_its_groups(runs, tmp_path, capsys, cond, groups):
    root, data = runs
    assert _eval(root, data, tmp_path, cond, "e") == EXIT_OK
    out = capsys.readouterr().out
    assert f"groups read: {groups}\n" in out
    assert (tmp_path / "e" / f"report-{cond}.txt").read_text() == out


def test_eval_twice_identical(runs, tmp_path):
    root, data = runs
    assert _eval(root, data, tmp_path, "t", "a") == EXIT_OK
    assert _eval(root, data, tmp_path, "t", "b") == EXIT_OK
    assert _sha(tmp_path / "a" / "report-t.csv") == _sha(tmp_path / "b" / "report-t.csv")


def test_eval_bundle_missing_group_is_data_error(runs, tmp_path):
    from rgbt_decouple.bundle import ParameterBundle, load_bundle, save_bundle
    root, data = runs
    part = tmp_path / "rgb-only.rtfd"
    full = load_bundle(root / "train" / "bundle.rtfd")
    save_bundle(part, ParameterBundle({g: full[g] for g in ("rgb_encoder", "rgb_decoder")}))
    base = ["eval", "--out-dir", str(tmp_path), "--data", str(data), "--bundle", str(part)]
    assert main(base + ["--condition", "rgb"]) == EXIT_OK
    assert main(base + ["--condition", "t"]) == EXIT_DATA


def test_verify_passes_and_mutation_fails(tmp_path, capsys):
    assert main(["verify", "--out-dir", str(tmp_path), "--suites", "op-gradients,gate-oracles"]) == EXIT_OK
    assert "all suites passed" in capsys.readouterr().out
    assert main(["verify", "--out-dir", str(tmp_path), "--suites", "op-gradients", "--mutate", "sigmoid"]) == EXIT_VERIFY
    text = (tmp_path / "verify" / "report-verify.csv").read_text()
    assert "op-gradients,FAIL" in text


def test_verify_unknown_suite(tmp_path):
    assert main(["verify", "--out-dir", str(tmp_path), "--suites", "nope"]) == EXIT_USAGE


def test_ablate_small(runs, tmp_path, capsys):
    _, data = runs
    args = ["ablate", "--out-dir", str(tmp_path), "--data", str(data), "--epochs", "1",
            "--variants", "baseline-add,full", "--seeds", "0", "--robustness"]
    assert main(args) == EXIT_OK
    lines = (tmp_path / "ablate" / "report-ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,sff,cmdr,rdr,seed,rgb_miou,thermal_miou,rgbt_miou"
    assert [l.split(",")[0] for l in lines[1:]] == ["baseline-add", "full", "baseline-add", "full"]
    assert (tmp_path / "ablate" / "report-robustness.csv").exists()


def test_ablate_jobs_do_not_change_results(runs, tmp_path):
    _, data = runs
    base = ["ablate", "--data", str(data), "--epochs", "1", "--variants", "+SFF,full", "--seeds", "0,1", "--robustness"]
    assert main(base + ["--out-dir", str(tmp_path / "serial")]) == EXIT_OK
    assert main(base + ["--out-dir", str(tmp_path / "pool"), "--jobs", "2"]) == EXIT_OK
    for name in ("report-ablation.csv", "report-robustness.csv"):
        assert _sha(tmp_path / "serial" / "ablate" / name) == _sha(tmp_path / "pool" / "ablate" / name)


def test_ablate_unknown_variant(runs, tmp_path):
    _, data = runs
    assert main(["ablate", "--out-dir", str(tmp_path), "--data", str(data), "--variants", "magic"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    env = {**os.environ, "PYTHONWARNINGS": "ignore"}
    proc = subprocess.run([sys.executable, "-m", "rgbt_decouple", "gen-data", "--out-dir", str(tmp_path), "--height", "30"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == EXIT_USAGE
    assert "divisible" in proc.stderr
