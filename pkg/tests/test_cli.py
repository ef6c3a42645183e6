import json

import pytest

from gsto.cli import main

TINY = [
    "num_users=40", "num_intentions=30", "num_clusters=3", "dim=8", "max_len=10", "blocks=1",
    "epochs=2", "batch_size=16", "relation_epochs=5", "relation_dim=8", "k=3", "learning_rate=1e-3",
]


def run(capsys, command, out_dir, *extra, ablate=None):
    argv = [command] + (["--ablate", ablate] if ablate else []) + TINY + [f"out_dir={out_dir}", *extra]
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = [l for l in err.strip().splitlines() if l.startswith("{")]
    assert len(lines) == 1, err
    return json.loads(lines[0])


def pipeline(capsys, out_dir, ablate=None, *extra):
    for cmd in ("gen-data", "build-graph", "train", "eval"):
        code, out, err = run(capsys, cmd, out_dir, *extra, ablate=ablate)
        assert code == 0, (cmd, err)
    return out_dir / "report.json"


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("a")
    for cmd in ("gen-data", "build-graph", "train", "eval"):
        assert main([cmd] + TINY + [f"out_dir={out}"]) == 0
    return out


def test_pipeline_report_has_every_metric(full_run):
    report = json.loads((full_run / "report.json").read_text())
    assert set(report["metrics"]) == {"hit@1", "hit@2", "hit@5", "hit@10", "ndcg@10"}
    m = report["metrics"]
    assert m["hit@1"] <= m["hit@2"] <= m["hit@5"] <= m["hit@10"]
    assert report["num_users"] == 40
    assert not any("path" in k or k == "out_dir" for k in report["config"])


def test_manifests_record_hashes(full_run):
    for cmd in ("gen-data", "build-graph", "train", "eval"):
        manifest = json.loads((full_run / f"manifest-{cmd}.json").read_text())
        assert manifest["command"] == cmd and manifest["seed"] == 0
        assert all(len(h) == 64 for h in manifest["outputs"].values())


def test_reports_byte_identical_across_runs(full_run, tmp_path, capsys):
    again = pipeline(capsys, tmp_path)
    assert again.read_bytes() == (full_run / "report.json").read_bytes()


def test_cb_and_val_reports(full_run, capsys):
    code, out, _ = run(capsys, "eval", full_run, "method=cb", "report_path=" + str(full_run / "cb.json"))
    assert code == 0 and json.loads((full_run / "cb.json").read_text())["method"] == "cb"
    code, *_ = run(capsys, "eval", full_run, "split=val", "per_user_csv=true",
                   "report_path=" + str(full_run / "val.json"))
    assert code == 0
    rows = (full_run / "val_per_user.csv").read_text().splitlines()
    assert rows[1] == "user,key,label,rank" and len(rows) == 42


def test_graph_mismatch_refused(full_run, tmp_path, capsys):
    # a graph built for the same corpus but by a different mode
    other = tmp_path / "oracle.tsv"
    code, *_ = run(capsys, "build-graph", full_run, "graph_mode=oracle", f"graph_path={other}")
    assert code == 0
    code, _, err = run(capsys, "eval", full_run, f"graph_path={other}", f"report_path={tmp_path / 'r.json'}")
    assert code == 5 and error_of(err)["error"] == "ArtifactMismatch"
    assert not (tmp_path / "r.json").exists()


@pytest.mark.parametrize("ablate", ["no-gr", "no-sr"])
def test_ablations_run(full_run, tmp_path, capsys, ablate):
    # without the regularizer no graph file is needed
    stages = ["gen-data"] if ablate == "no-gr" else ["gen-data", "build-graph"]
    for cmd in stages:
        assert run(capsys, cmd, tmp_path, ablate=ablate)[0] == 0
    code, _, err = run(capsys, "train", tmp_path, ablate=ablate)
    assert code == 0, err
    code, _, err = run(capsys, "eval", tmp_path, ablate=ablate)
    assert code == 0, err
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["ablate"] == ablate
    if ablate == "no-gr":
        assert report["graph_hash"] == "identity"


def test_gradcheck_and_mad(full_run, capsys):
    code, out, _ = run(capsys, "gradcheck", full_run)
    assert code == 0 and json.loads((full_run / "gradcheck.json").read_text())["passed"]
    code, out, _ = run(capsys, "mad", full_run)
    assert code == 0
    assert (full_run / "mad.csv").read_text().splitlines()[1] == "gcn_layers,mad"


def test_missing_input_exits_2(tmp_path, capsys):
    out = tmp_path / "never"
    code, _, err = run(capsys, "train", out)
    assert code == 2 and error_of(err)["error"] == "MissingInputError"
    assert not out.exists()


def test_config_errors_exit_3(tmp_path, capsys):
    for bad in ("no_such_key=1", "dim=abc", "learning_rate=-1", "graph_mode=dense"):
        code, _, err = run(capsys, "gen-data", tmp_path / "x", bad)
        assert code == 3, bad
        assert error_of(err)["exit_code"] == 3
    assert not (tmp_path / "x").exists()
    code, _, err = run(capsys, "gen-data", tmp_path, f"--config={tmp_path / 'missing.cfg'}")
    assert code == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny\nnum_users = 25\n")
    code, out, _ = run(capsys, "gen-data", tmp_path, f"--config={cfg}")
    # command-line overrides win over the file
    assert code == 0 and json.loads(out)["events"] > 0
    manifest = json.loads((tmp_path / "manifest-gen-data.json").read_text())
    assert manifest["config"]["num_users"] == 40


def test_divergence_exits_4_without_checkpoint(tmp_path, capsys):
    code, *_ = run(capsys, "gen-data", tmp_path)
    assert code == 0
    code, _, err = run(capsys, "train", tmp_path, "learning_rate=1e300", ablate="no-gr")
    info = error_of(err)
    assert code == 4 and info["error"] == "TrainingDiverged"
    assert not (tmp_path / "checkpoint.npz").exists()
    assert not (tmp_path / "train_log.csv").exists()


def test_show_config(capsys):
    assert main(["show-config"]) == 0
    out = capsys.readouterr().out
    assert "learning_rate = " in out and "seed = 0" in out
