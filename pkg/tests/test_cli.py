import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from fairprobe.cli import main
from fairprobe.dataio import load_bundle, read_pgm, write_pgm
from fairprobe.metrics import MetricsReport

SMALL = {"num_domains": 3, "num_classes": 3, "feature_dim": 8, "samples_per_domain": 80,
         "signal_strength": 3.0, "domain_strength": 2.0, "seed": 0}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def raw(tmp_path):
    fixture = tmp_path / "small.json"
    fixture.write_text(json.dumps(SMALL))
    assert main(["synth", "--fixture", str(fixture), "--out", str(tmp_path / "raw")]) == 0
    return tmp_path / "raw"


@pytest.fixture
def prepped(raw, tmp_path):
    assert main(["prep", "--data", str(raw), "--seed", "1", "--out", str(tmp_path / "prep")]) == 0
    return tmp_path / "prep"


def _train(prepped, out, *extra):
    return main(["train", "--data", str(prepped), "--epochs", "3", "--seed", "1",
                 "--out", str(out), *extra])


def test_synth_reference_fixture(tmp_path):
    assert main(["synth", "--fixture", "S3", "--out", str(tmp_path)]) == 0
    bundle = load_bundle(tmp_path / "manifest.csv", tmp_path / "embeddings.fmbe")
    assert len(bundle) == 1600 and bundle.dataset_ids == ["d0", "d1"]


def test_synth_seed_from_environment(tmp_path, monkeypatch):
    fixture = tmp_path / "small.json"
    fixture.write_text(json.dumps(SMALL))
    main(["synth", "--fixture", str(fixture), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("FAIRPROBE_SEED", "7")
    main(["synth", "--fixture", str(fixture), "--out", str(tmp_path / "b")])
    main(["synth", "--fixture", str(fixture), "--seed", "7", "--out", str(tmp_path / "c")])
    emb = [_digest(tmp_path / d / "embeddings.fmbe") for d in "abc"]
    assert emb[0] != emb[1] and emb[1] == emb[2]


def test_prep_splits_patients_and_is_reproducible(raw, tmp_path):
    for d in ("p1", "p2"):
        assert main(["prep", "--data", str(raw), "--seed", "3", "--out", str(tmp_path / d)]) == 0
    for name in ("manifest.csv", "embeddings.fmbe"):
        assert _digest(tmp_path / "p1" / name) == _digest(tmp_path / "p2" / name)
    bundle = load_bundle(tmp_path / "p1" / "manifest.csv", tmp_path / "p1" / "embeddings.fmbe")
    splits = {}
    for r in bundle.records:
        assert splits.setdefault(r.patient_key, r.split) == r.split
    assert set(splits.values()) == {"train", "test"}


def test_prep_cap(raw, tmp_path):
    assert main(["prep", "--data", str(raw), "--cap", "2", "--out", str(tmp_path / "p")]) == 0
    bundle = load_bundle(tmp_path / "p" / "manifest.csv", tmp_path / "p" / "embeddings.fmbe")
    patients = {}
    for r in bundle.records:
        patients.setdefault((r.dataset_id, r.diagnosis), set()).add(r.patient_id)
    assert all(len(v) == 2 for v in patients.values())


def test_prep_config_file_and_flag_priority(raw, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(raw), "cap": 1, "split-fraction": 0.5,
                               "out": str(tmp_path / "from_cfg")}))
    assert main(["prep", "--config", str(cfg), "--cap", "2"]) == 0
    bundle = load_bundle(tmp_path / "from_cfg" / "manifest.csv",
                         tmp_path / "from_cfg" / "embeddings.fmbe")
    assert len({r.patient_key for r in bundle.records}) == 2 * 3 * 3


def test_train_individual_and_pooled(prepped, tmp_path):
    assert _train(prepped, tmp_path / "ind", "--mode", "individual") == 0
    assert sorted(p.name for p in (tmp_path / "ind").glob("*.fmpb")) == [
        "individual-d0.fmpb", "individual-d1.fmpb", "individual-d2.fmpb"]
    assert _train(prepped, tmp_path / "uni") == 0
    assert [p.name for p in (tmp_path / "uni").glob("*.fmpb")] == ["unified.fmpb"]
    history = (tmp_path / "uni" / "unified.history.csv").read_text().splitlines()
    assert len(history) == 4


def test_train_grid_search_writes_nine_candidates(prepped, tmp_path):
    assert _train(prepped, tmp_path / "g", "--grid-search") == 0
    with open(tmp_path / "g" / "grid-unified.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert {(r["batch_size"], float(r["learning_rate"])) for r in rows} == {
        (str(b), lr) for b in (8, 16, 32) for lr in (1e-3, 1e-4, 1e-5)}


def test_train_needs_split(raw, tmp_path, capsys):
    assert _train(raw, tmp_path / "x") == 3
    assert capsys.readouterr().err.startswith("error[E_DATA]:")


def test_failed_train_leaves_no_files(prepped, tmp_path, capsys):
    code = _train(prepped, tmp_path / "t", "--strategies", "wce,fades", "--set", "z_dim=8")
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[E_CONFIG]:") and "\n" not in err
    assert list((tmp_path / "t").glob("*")) == []


def test_unknown_strategy(prepped, tmp_path):
    assert _train(prepped, tmp_path / "t", "--strategies", "svm") == 2


def test_eval_individual_rows(prepped, tmp_path):
    _train(prepped, tmp_path / "ind", "--mode", "individual")
    _train(prepped, tmp_path / "ind", "--strategies", "wce,groupdro")
    assert main(["eval", "--data", str(prepped), "--checkpoints", str(tmp_path / "ind"),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = MetricsReport.from_csv(tmp_path / "ev" / "report.csv")
    for ds in ("d0", "d1", "d2"):
        per_model = rep.select(metric="f1", strategy=f"individual-{ds}")
        assert sorted(r.dataset for r in per_model) == ["d0", "d1", "d2"]
        others = [r.value for r in per_model if r.dataset != ds]
        assert rep.value(metric="f1_external", dataset=ds) == pytest.approx(np.mean(others))
        assert rep.value(metric="f1_internal", dataset=ds) == rep.value(
            metric="f1", strategy=f"individual-{ds}", dataset=ds)
    assert rep.value(metric="aod_avg", strategy="groupdro", group1="density") is not None
    table = (tmp_path / "ev" / "table.md").read_text()
    assert "| unified |" in table and "| groupdro |" in table and "| individual |" in table


def test_eval_individual_on_own_domain_only(prepped, tmp_path):
    _train(prepped, tmp_path / "ind", "--mode", "individual")
    sub = tmp_path / "only_d0"
    sub.mkdir()
    lines = (prepped / "manifest.csv").read_text().splitlines()
    header, rows = lines[0], lines[1:]
    col = header.split(",").index("dataset_id")
    keep = [i for i, r in enumerate(rows) if r.split(",")[col] == "d0"]
    bundle = load_bundle(prepped / "manifest.csv", prepped / "embeddings.fmbe").subset(keep)
    from fairprobe.dataio import save_bundle
    save_bundle(bundle, sub / "manifest.csv", sub / "embeddings.fmbe")
    assert main(["eval", "--data", str(sub), "--checkpoints", str(tmp_path / "ind" / "individual-d0.fmpb"),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = MetricsReport.from_csv(tmp_path / "ev" / "report.csv")
    assert rep.value(metric="f1_internal", dataset="d0") is not None
    assert rep.select(metric="f1_external", dataset="d0")[0].missing


def test_eval_dimension_mismatch(prepped, tmp_path, capsys):
    _train(prepped, tmp_path / "m")
    other = tmp_path / "wide.json"
    other.write_text(json.dumps({**SMALL, "feature_dim": 10}))
    main(["synth", "--fixture", str(other), "--out", str(tmp_path / "wraw")])
    main(["prep", "--data", str(tmp_path / "wraw"), "--out", str(tmp_path / "wprep")])
    code = main(["eval", "--data", str(tmp_path / "wprep"), "--checkpoints", str(tmp_path / "m"),
                 "--out", str(tmp_path / "ev")])
    assert code == 3
    assert capsys.readouterr().err.startswith("error[E_DIM]:")
    assert not (tmp_path / "ev" / "report.csv").exists()


def test_eval_report_roundtrips(prepped, tmp_path):
    _train(prepped, tmp_path / "m")
    main(["eval", "--data", str(prepped), "--checkpoints", str(tmp_path / "m"), "--out", str(tmp_path / "e")])
    rep = MetricsReport.from_csv(tmp_path / "e" / "report.csv")
    rep.to_csv(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "e" / "report.csv").read_bytes()


def _report(tmp_path, a, b):
    lines = ["metric,task,strategy,dataset,class,group1,group2,value,missing"]
    for i, (x, y) in enumerate(zip(a, b)):
        lines.append(f"f1,diagnosis,A,d{i},,,,{x!r},0")
        lines.append(f"f1,diagnosis,B,d{i},,,,{y!r},0")
    path = tmp_path / "rep.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_stats_self_comparison(tmp_path, capsys):
    path = _report(tmp_path, [0.5, 0.6, 0.7], [0.1, 0.2, 0.3])
    assert main(["stats", "--report-a", str(path), "--strategy-a", "A"]) == 0
    assert capsys.readouterr().out.strip().endswith("p=1")


def test_stats_dominance_gets_one_star(tmp_path, capsys):
    path = _report(tmp_path, [0.9] * 8, [0.1 * i for i in range(8)])
    out = tmp_path / "s.csv"
    assert main(["stats", "--report-a", str(path), "--strategy-a", "A", "--strategy-b", "B",
                 "--out", str(out)]) == 0
    row = list(csv.DictReader(open(out)))[0]
    assert float(row["p_value"]) == pytest.approx(1 / 256)
    assert row["stars"] == "*"


def test_stats_below_median_has_no_stars(tmp_path):
    a = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
    b = [0.49, 0.48, 0.6, 0.7, 0.8, 0.9, 0.45, 0.95]
    out = tmp_path / "s.csv"
    main(["stats", "--report-a", str(_report(tmp_path, a, b)), "--strategy-a", "A",
          "--strategy-b", "B", "--out", str(out)])
    row = list(csv.DictReader(open(out)))[0]
    assert float(row["p_value"]) > 0.5 and row["stars"] == ""


def test_stats_disjoint_keys(tmp_path, capsys):
    path = _report(tmp_path, [0.5], [0.4])
    assert main(["stats", "--report-a", str(path), "--strategy-a", "A", "--strategy-b", "C"]) == 3


def test_project(raw, tmp_path):
    out1, out2 = tmp_path / "p1.csv", tmp_path / "p2.csv"
    assert main(["project", "--data", str(raw), "--out", str(out1)]) == 0
    main(["project", "--data", str(raw), "--out", str(out2)])
    rows = list(csv.reader(open(out1)))
    assert rows[0] == ["sample_id", "dim1", "dim2", "dataset_id", "density"]
    assert len(rows) - 1 == 240
    assert out1.read_bytes() == out2.read_bytes()


def test_project_collinear(tmp_path):
    from fairprobe.dataio import SampleRecord, DatasetBundle, save_bundle
    t = np.linspace(-1, 1, 20)
    emb = np.outer(t, [1.0, 2.0, 2.0])
    recs = tuple(SampleRecord(f"s{i}", f"p{i}", "d0", diagnosis="healthy") for i in range(20))
    save_bundle(DatasetBundle(recs, emb), tmp_path / "manifest.csv", tmp_path / "embeddings.fmbe")
    main(["project", "--data", str(tmp_path), "--out", str(tmp_path / "p.csv")])
    dim2 = [float(r["dim2"]) for r in csv.DictReader(open(tmp_path / "p.csv"))]
    assert np.allclose(dim2, 0.0, atol=1e-5)


def test_preprocess_image(tmp_path):
    img = np.zeros((10, 12), dtype=np.uint8)
    img[3:7, 2:9] = 200
    write_pgm(tmp_path / "in.pgm", img)
    assert main(["preprocess-image", "--input", str(tmp_path / "in.pgm"),
                 "--output", str(tmp_path / "out.pgm")]) == 0
    assert read_pgm(tmp_path / "out.pgm").shape == (4, 7)


def test_preprocess_image_blank_fails_cleanly(tmp_path):
    write_pgm(tmp_path / "in.pgm", np.zeros((4, 4), dtype=np.uint8))
    code = main(["preprocess-image", "--input", str(tmp_path / "in.pgm"),
                 "--output", str(tmp_path / "out.pgm")])
    assert code == 3 and not (tmp_path / "out.pgm").exists()


def test_missing_inputs_exit_code(tmp_path):
    assert main(["prep", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_bad_config_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["prep", "--config", str(tmp_path / "c.json")]) == 2


def test_module_entry_point_error_line(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fairprobe.cli", "synth", "--fixture", "S9",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error[E_CONFIG]:")


def test_pipeline_is_deterministic(raw, tmp_path):
    digests = []
    for run in ("r1", "r2"):
        base = tmp_path / run
        main(["prep", "--data", str(raw), "--seed", "5", "--out", str(base / "prep")])
        _train(base / "prep", base / "ckpt", "--mode", "individual")
        _train(base / "prep", base / "ckpt", "--strategies", "wce,dann,groupdro,moe")
        main(["eval", "--data", str(base / "prep"), "--checkpoints", str(base / "ckpt"),
              "--out", str(base / "eval")])
        digests.append([_digest(base / "eval" / n) for n in ("report.csv", "table.md")])
    assert digests[0] == digests[1]
