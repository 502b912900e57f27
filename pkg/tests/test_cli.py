import json

import pytest
from PIL import Image

from aesnet import __version__, cli

TINY = """\
[run]
seed = 3
[data]
count = 40
height = 32
width = 16
[network]
channels = 2, 4
keypoint_widths = 8, 8
classifier_widths = 4, 1
[train]
stage1_epochs = 2
stage2_epochs = 2
batch_size = 8
[svm]
folds = 2
[retrieve]
scale = 2
[explain]
limit = 3
"""

ARTIFACTS = ["m/model.aesn", "m/stage1.aesn", "m/stage2.aesn", "m/epochs.csv", "e/report.json", "e/report.txt",
             "r/retrieval.json", "r/retrieval.txt", "r/index.aesi", "x/explain.json"]


def pipeline(root, ini):
    d, m = str(root / "d"), str(root / "m")
    steps = [
        ["gen-data", "--out", d],
        ["train", "--data", d, "--out", m],
        ["eval", "--data", d, "--model", m, "--out", str(root / "e")],
        ["retrieve", "--data", d, "--model", m, "--out", str(root / "r")],
        ["explain", "--data", d, "--model", m, "--out", str(root / "x"), "--dump"],
    ]
    for step in steps:
        assert cli.main(step + ["--config", str(ini)]) == 0, step


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY)
    pipeline(root / "a", ini)
    pipeline(root / "b", ini)
    return root


def test_eval_table_layout(runs):
    report = json.loads((runs / "a/e/report.json").read_text())
    names = [r["model"] for r in report["rows"]]
    assert names == ["SVM linear 4", "SVM linear 7", "SVM rbf 4", "SVM rbf 7", "CNN"]
    assert all(set(r) == {"model", "accuracy", "balanced_accuracy"} for r in report["rows"])
    text = (runs / "a/e/report.txt").read_text().splitlines()
    assert len(text) == 2 + 5 and "balanced accuracy" in text[1]


def test_retrieve_emits_exactly_k(runs):
    rep = json.loads((runs / "a/r/retrieval.json").read_text())
    assert rep["k"] == 3 and rep["queries"]
    for q in rep["queries"]:
        assert len(q["neighbours"]) == 3
        d = [n["distance"] for n in q["neighbours"]]
        assert d == sorted(d)
        assert (runs / "a/r/grids" / f"{q['id']}.png").exists()
    with Image.open(runs / "a/r/grids" / f"{rep['queries'][0]['id']}.png") as im:
        assert im.mode == "RGB"


def test_explain_outputs(runs):
    rep = json.loads((runs / "a/x/explain.json").read_text())
    assert rep["images"] == 3 and len(rep["maps"]) == 3
    for m in rep["maps"]:
        assert (runs / "a/x/heatmaps" / f"{m['id']}.png").exists()
        assert (runs / "a/x/relevance" / f"{m['id']}.csv").exists()
        assert 0.0 <= m["region_fraction"] <= 1.0


def test_manifests_record_resolved_config(runs):
    for sub, command in (("d", "gen-data"), ("m", "train"), ("e", "eval"), ("r", "retrieve"), ("x", "explain")):
        man = json.loads((runs / "a" / sub / "manifest.json").read_text())
        assert man["version"] == __version__ and man["command"] == command
        assert man["config"]["seed"] == 3
        assert man["config"]["network"]["height"] == 32 and man["config"]["train"]["seed"] == 3


@pytest.mark.parametrize("rel", ARTIFACTS + ["d/labels.csv", "m/split.json", "m/summary.json"])
def test_rerun_is_byte_identical(runs, rel):
    assert (runs / "a" / rel).read_bytes() == (runs / "b" / rel).read_bytes()


def test_baseline_reuses_train_split(runs, tmp_path):
    out = tmp_path / "base"
    args = ["baseline", "--data", str(runs / "a/d"), "--model", str(runs / "a/m"), "--out", str(out),
            "--config", str(runs / "tiny.ini")]
    assert cli.main(args) == 0
    res = json.loads((out / "results.json").read_text())
    assert [r["model"] for r in res["rows"]] == ["SVM linear 4", "SVM linear 7", "SVM rbf 4", "SVM rbf 7"]
    for name in ("svm_linear_4.txt", "svm_rbf_7.txt", "features7_test.csv", "features4_trainval.csv"):
        assert (out / name).exists()
    split = json.loads((runs / "a/m/split.json").read_text())
    assert (out / "features4_test.csv").read_text().count("\n") == len(split["test"]) + 1
    # eval can take the table from a baseline run instead of refitting
    ev = tmp_path / "ev"
    assert cli.main(["eval", "--data", str(runs / "a/d"), "--model", str(runs / "a/m"), "--out", str(ev),
                     "--baseline", str(out), "--config", str(runs / "tiny.ini")]) == 0
    a = json.loads((ev / "report.json").read_text())["rows"]
    b = json.loads((runs / "a/e/report.json").read_text())["rows"]
    assert a == b


def test_config_defaults_and_overrides(tmp_path):
    cfg = cli.load_config(None)
    assert cfg.seed == 0 and cfg.get("train").stage1_epochs == 350 and cfg.get("svm").gamma == 3.0
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nseed = 5\n[data]\nheight = 48\nwidth = 32\n[svm]\nstandardize = off\n")
    cfg = cli.load_config(ini)
    assert cfg.seed == 5 and cfg.get("network").height == 48 and cfg.get("split").seed == 5
    assert cfg.get("svm").standardize is False
    assert cli.load_config(ini, seed=9).get("data").seed == 9


@pytest.mark.parametrize("text, match", [
    ("[nope]\nx = 1\n", "section"),
    ("[train]\nepochs = 3\n", "unknown key"),
    ("[train]\nseed = 3\n", "unknown key"),
    ("[train]\nbatch_size = many\n", "parse"),
    ("[train]\nstage1_epochs = 0\n", "epoch"),
    ("[data]\nthresholds = 0.1, 0.05, 0.2\n", "increase"),
])
def test_invalid_config_rejected(tmp_path, capsys, text, match):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(cli.ConfigError, match=match):
        cli.load_config(ini)
    assert cli.main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_inputs_exit_nonzero(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 1
    assert "not found" in capsys.readouterr().err
    (tmp_path / "m").mkdir()
    assert cli.main(["eval", "--data", str(tmp_path), "--model", str(tmp_path / "m"),
                     "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--out", str(tmp_path / "o")])
    assert e.value.code == 2
