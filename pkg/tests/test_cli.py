import json

import numpy as np
import pytest

from proctopic import ingest
from proctopic.cli import main
from proctopic.model import load_params
from studies import study1_errors


def _run(*argv):
    return main([str(a) for a in argv])


def test_help_and_unknown_flags(capsys):
    assert main(["--help"]) == 0
    assert main(["fit", "--help"]) == 0
    assert _run("fit", "--bogus") == 2
    assert _run() == 2


def test_ingest_table1(tmp_path):
    assert _run("ingest", "--log", ingest.table1_path(), "--out", tmp_path) == 0
    lines = (tmp_path / "corpus.csv").read_text().splitlines()
    assert lines == ["examinee_id,event_id,label,time",
                     '1,1,"(2,0,0)",60.100000000000001',
                     '1,2,"(0,2,0)",70',
                     '1,3,"(0,2,2)",80.5']
    assert (tmp_path / "codebook.csv").read_text().splitlines()[1] == '1,"(2,0,0)"'
    assert (tmp_path / "excluded.csv").read_text() == "examinee_id,reason\n"


def test_ingest_missing_log_exits_3(tmp_path):
    assert _run("ingest", "--log", tmp_path / "nope.csv", "--out", tmp_path) == 3


def test_fit_missing_corpus_exits_3(tmp_path, capsys):
    assert _run("fit", "--corpus", tmp_path / "nope.csv", "--k", 2) == 3
    assert "nope.csv" in capsys.readouterr().err


def test_fit_bad_k_exits_2(tmp_path):
    assert _run("simulate", "--preset", "study1", "--m", 5, "--out", tmp_path / "c.csv") == 0
    assert _run("fit", "--corpus", tmp_path / "c.csv", "--k", 0) == 2


def test_fit_study1_matches_table(tmp_path, capsys):
    corpus = tmp_path / "s1.csv"
    assert _run("simulate", "--preset", "study1", "--m", 100, "--seed", 0, "--out", corpus) == 0
    assert _run("fit", "--corpus", corpus, "--k", 2, "--ignore-time", "--out", tmp_path / "fit") == 0
    out = capsys.readouterr().out
    assert "Top events per topic" in out and "norm(R)" in out
    params = load_params(tmp_path / "fit" / "params.json")
    err_B, err_R = study1_errors(params)
    assert err_B <= 0.05 and err_R <= 0.05
    assert (tmp_path / "fit" / "summary.txt").read_text() in out


def test_fit_is_byte_deterministic(tmp_path):
    corpus = tmp_path / "c.csv"
    _run("simulate", "--preset", "study2", "--m", 20, "--seed", 4, "--out", corpus)
    for d in ("a", "b"):
        assert _run("fit", "--corpus", corpus, "--k", 3, "--restarts", 2, "--max-iters", 15, "--seed", 9,
                    "--out", tmp_path / d) == 0
    for name in ("params.json", "states.jsonl", "trace.csv", "fit.json", "codebook.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_simulate_study2_size(tmp_path):
    out = tmp_path / "s2.csv"
    assert _run("simulate", "--preset", "study2", "--m", 1000, "--seed", 1, "--out", out) == 0
    seqs, book = ingest.read_corpus(out)
    total = sum(len(s) for s in seqs)
    assert len(seqs) == 1000 and 4.5e5 <= total <= 5.5e5
    assert book.V == 10


def test_simulate_study3_truth(tmp_path):
    out = tmp_path / "s3.csv"
    assert _run("simulate", "--preset", "study3", "--m", 3, "--out", out, "--emit-truth") == 0
    params = load_params(tmp_path / "s3.csv.params.json")
    assert params.K == 8 and params.V == 1000
    truth = json.loads((tmp_path / "s3.csv.truth.json").read_text())
    assert len(truth["paths"]) == 3
    seqs, _ = ingest.read_corpus(out)
    assert all(len(s) == 100 for s in seqs)


def test_simulate_validation(tmp_path):
    assert _run("simulate", "--preset", "study2", "--m", 0, "--out", tmp_path / "x.csv") == 2
    assert _run("simulate", "--m", 3, "--out", tmp_path / "x.csv") == 2


def test_simulate_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        _run("simulate", "--preset", "study2", "--m", 30, "--seed", 5, "--out", tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.fixture(scope="module")
def small_fit(tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    _run("simulate", "--preset", "study2", "--m", 40, "--seed", 2, "--out", d / "c.csv")
    assert _run("fit", "--corpus", d / "c.csv", "--k", 4, "--restarts", 1, "--max-iters", 30,
                "--out", d / "fit") == 0
    return d / "fit"


def test_cluster(small_fit, tmp_path):
    assert _run("cluster", "--fit", small_fit, "--n-clusters", 4, "--restarts", 5, "--out", tmp_path) == 0
    rows = (tmp_path / "assignments.csv").read_text().splitlines()[1:]
    labels = [int(r.split(",")[1]) for r in rows]
    assert len(labels) == 40 and set(labels) <= {1, 2, 3, 4}
    centers = np.loadtxt(tmp_path / "centers.csv", delimiter=",", skiprows=1)
    assert centers.shape == (4, 17)
    first = (tmp_path / "assignments.csv").read_bytes()
    _run("cluster", "--fit", small_fit, "--n-clusters", 4, "--restarts", 5, "--out", tmp_path)
    assert (tmp_path / "assignments.csv").read_bytes() == first
    assert _run("cluster", "--fit", small_fit, "--n-clusters", 0, "--out", tmp_path) == 2


def test_bootstrap(small_fit, tmp_path):
    out = tmp_path / "se.csv"
    assert _run("bootstrap", "--fit", small_fit, "--n-boot", 2, "--max-iters", 10, "--out", out) == 0
    se = np.loadtxt(out, delimiter=",", skiprows=1, usecols=3)
    assert np.all(np.isfinite(se)) and len(se) == 40 + 16 + 4 + 16 + 1 + 1


def test_report(small_fit, capsys):
    assert _run("report", "--fit", small_fit) == 0
    assert "Top events per topic" in capsys.readouterr().out


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"simulate": {"m": 7, "seed": 3}}))
    assert _run("--config", cfg, "simulate", "--preset", "study2", "--out", tmp_path / "c.csv") == 0
    seqs, _ = ingest.read_corpus(tmp_path / "c.csv")
    assert len(seqs) == 7
    assert _run("--config", cfg, "simulate", "--preset", "study2", "--m", 2, "--out", tmp_path / "d.csv") == 0
    assert len(ingest.read_corpus(tmp_path / "d.csv")[0]) == 2
