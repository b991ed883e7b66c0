import glob
import json
import os

import pytest

from prunedlearn.cli import main
from prunedlearn.manifest import RunManifest, sha256_file

SMALL = ["--d", "20", "--K", "3", "--r", "5"]


def only(pattern):
    (path,) = glob.glob(pattern)
    return path


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out.strip(), out.err


def test_gen_oracle_writes_json_csv_and_manifest(tmp_path, capsys):
    code, printed, _ = run(["gen-oracle", *SMALL, "--out-dir", str(tmp_path)], capsys)
    assert code == 0 and printed.endswith(".manifest.json")
    m = RunManifest.load(printed)
    assert {o["file"].rsplit(".", 2)[-2] + "." + o["file"].rsplit(".", 1)[-1] for o in m.outputs} == \
        {"oracle.json", "mask.csv"}
    for o in m.outputs:
        assert sha256_file(os.path.join(tmp_path, o["file"])) == o["sha256"]
    assert m.config["d"] == 20 and m.master_seed == 0
    assert os.path.basename(printed).startswith(f"gen-oracle-{m.stamp}-{m.spec_hash}")


def test_train_from_saved_oracle_and_rerun(tmp_path, capsys):
    _, oracle_manifest, _ = run(["gen-oracle", *SMALL, "--out-dir", str(tmp_path / "o")], capsys)
    oracle = only(str(tmp_path / "o" / "*.oracle.json"))
    code, printed, _ = run(["train", "--oracle", oracle, "--N", "300", "--eta", "2", "--max-iters", "200",
                            "--out-dir", str(tmp_path / "t")], capsys)
    assert code == 0
    m = RunManifest.load(printed)
    assert m.inputs[0]["sha256"] == sha256_file(oracle)
    trace = only(str(tmp_path / "t" / "*.trace.csv"))
    with open(trace) as fh:
        assert fh.readline().strip().split(",")[:2] == ["iter", "rel_error"]
    code, _, _ = run(["rerun", printed, "--out-dir", str(tmp_path / "again")], capsys)
    assert code == 0
    with open(trace, "rb") as a, open(tmp_path / "again" / os.path.basename(trace), "rb") as b:
        assert a.read() == b.read()
    # a modified input is refused
    with open(oracle, "a") as fh:
        fh.write(" ")
    code, _, err = run(["rerun", printed, "--out-dir", str(tmp_path / "third")], capsys)
    assert code == 2 and "changed since the original run" in err


def test_probe_hessian(tmp_path, capsys):
    code, printed, _ = run(["probe-hessian", *SMALL, "--N", "200", "--n-probes", "3",
                            "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    rows = open(only(str(tmp_path / "*.probes.csv"))).read().splitlines()
    assert rows[0].startswith("n_params,r_tilde") and len(rows) == 4
    assert RunManifest.load(printed).summary["n_probes"] == 3


@pytest.mark.parametrize("threads", [1, 2])
def test_grid_rerun_is_byte_identical_at_any_thread_count(tmp_path, capsys, threads):
    argv = ["phase-radius", "--d", "20", "--K", "3", "--N", "150", "--eta", "5", "--max-iters", "150",
            "--r-tilde-values", "4,6", "--lam-values", "0.5,4", "--trials", "2",
            "--threads", "2", "--out-dir", str(tmp_path / "a")]
    code, printed, _ = run(argv, capsys)
    assert code == 0
    m = RunManifest.load(printed)
    assert m.summary["experiment"] == "radius_phase_diagram" and "fits" in m.summary
    code, msg, _ = run(["rerun", printed, "--threads", str(threads), "--out-dir", str(tmp_path / "b")], capsys)
    assert code == 0 and "reproduced" in msg
    for o in m.outputs:
        assert sha256_file(str(tmp_path / "b" / o["file"])) == o["sha256"]


def test_rerun_reports_mismatch(tmp_path, capsys):
    _, printed, _ = run(["gen-oracle", *SMALL, "--out-dir", str(tmp_path)], capsys)
    doc = json.loads(open(printed).read())
    doc["outputs"][0]["sha256"] = "0" * 64
    with open(printed, "w") as fh:
        json.dump(doc, fh)
    code, _, err = run(["rerun", printed, "--out-dir", str(tmp_path / "b")], capsys)
    assert code == 3 and "differ" in err


def test_config_file_and_set_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[oracle]\nd = 20\nK = 3\nr = 5\n")
    code, printed, _ = run(["gen-oracle", "--config", str(cfg), "--set", "r=4", "--seed", "9",
                            "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    m = RunManifest.load(printed)
    assert m.config["r"] == 4 and m.master_seed == 9


@pytest.mark.parametrize("argv, message", [
    (["train", "--beta", "1.0"], r"beta must lie in [0,1)"),
    (["train", "--set", "bogus=1"], "unknown key 'bogus'"),
    (["train", "--set", "novalue"], "KEY=VALUE"),
    (["gen-oracle", "--trials", "4"], "does not apply"),
    (["train", "--threads", "0"], "--threads"),
    (["train", "--config", "/nonexistent/x.cfg"], "No such file"),
    (["rerun", "/nonexistent/m.json"], "No such file"),
])
def test_errors_exit_nonzero_with_message(tmp_path, capsys, argv, message):
    code, _, err = run(argv + ["--out-dir", str(tmp_path)] if argv[0] != "rerun" else argv, capsys)
    assert code == 2 and message in err


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
