import subprocess
import sys

import pytest

from dkgqa import cli, data, kgstore
from dkgqa.training import parse_log_line

import helpers


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def toy_files(tmp_path):
    tsv = tmp_path / "toy.tsv"
    tsv.write_text(helpers.TOY_PLUS_TSV, encoding="utf-8")
    ds = tmp_path / "ds"
    ds.mkdir()
    samples = helpers.toy_training_samples()
    for split in ("train", "dev", "test"):
        data.save_dataset(samples, ds / f"{split}.jsonl")
    return tmp_path, tsv, ds


@pytest.fixture
def trained_toy(capsys, toy_files):
    tmp, tsv, ds = toy_files
    kg = tmp / "toy.dkg"
    assert run(capsys, "build-kg", "--triples", tsv, "--kg", kg)[0] == 0
    code, out, err = run(
        capsys, "train", "--kg", kg, "--dataset", ds, "--checkpoint", tmp / "m.dkm",
        "--metrics-log", tmp / "log.txt", "--dim", 16, "--batch-size", 7, "--grad-accum", 1,
        "--steps", 300, "--lr", 0.05, "--eval-every", 100,
    )
    assert code == 0, err
    return tmp, kg, ds, out


# -- build-kg ----------------------------------------------------------------------


def test_build_kg_toy_with_inverses(capsys, tmp_path):
    tsv = tmp_path / "t.tsv"
    tsv.write_text(helpers.TOY_TSV, encoding="utf-8")
    code, out, _ = run(capsys, "build-kg", "--triples", tsv, "--kg", tmp_path / "k.dkg")
    assert code == 0
    assert out.strip() == "entities=6 relations=4 triples=10"
    assert kgstore.read_store(tmp_path / "k.dkg").n_triples == 10


def test_build_kg_subgraph_matches_bfs(capsys, tmp_path):
    tsv = tmp_path / "t.tsv"
    tsv.write_text(helpers.TOY_PLUS_TSV, encoding="utf-8")
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("NataliePortman\n", encoding="utf-8")
    code, _, _ = run(
        capsys, "build-kg", "--triples", tsv, "--kg", tmp_path / "k.dkg", "--seeds", seeds,
        "--hops", 1, "--tsv", tmp_path / "out.tsv",
    )
    assert code == 0
    full = helpers.toy_store(inverse=True, extra=True)
    got = set(kgstore.read_store(tmp_path / "k.dkg").named_triples())
    assert got == helpers.bfs_subgraph(full, ["NataliePortman"], 1)
    rows = {tuple(ln.split("\t")) for ln in (tmp_path / "out.tsv").read_text(encoding="utf-8").splitlines()}
    assert rows == got


def test_build_kg_malformed_line(capsys, tmp_path):
    tsv = tmp_path / "t.tsv"
    tsv.write_text("a\tp\tb\nbroken line\n", encoding="utf-8")
    code, out, err = run(capsys, "build-kg", "--triples", tsv, "--kg", tmp_path / "k.dkg")
    assert code == 1
    assert err.count("\n") == 1 and "line 2" in err


def test_build_kg_missing_input(capsys, tmp_path):
    code, _, err = run(capsys, "build-kg", "--triples", tmp_path / "nope.tsv", "--kg", tmp_path / "k")
    assert code == 1 and "cannot read triples" in err


# -- gen-data ----------------------------------------------------------------------


def test_gen_data_is_byte_identical(capsys, tmp_path):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "gen-data", "--kg", tmp_path / f"{name}.dkg", "--dataset", tmp_path / name)
        assert code == 0
        outs.append([(tmp_path / f"{name}.dkg").read_bytes()] + [
            (tmp_path / name / f"{s}.jsonl").read_bytes() for s in ("train", "dev", "test")
        ])
    assert outs[0] == outs[1]
    assert len((tmp_path / "a" / "test.jsonl").read_text(encoding="utf-8").splitlines()) == 100


def test_gen_data_constraint_failure(capsys, tmp_path):
    code, _, err = run(
        capsys, "gen-data", "--kg", tmp_path / "k.dkg", "--dataset", tmp_path / "d", "--n-characters", 5
    )
    assert code == 1 and "constraint failed" in err


# -- train / eval / explain ----------------------------------------------------------------


def test_train_zero_steps_writes_checkpoint(capsys, toy_files):
    tmp, tsv, ds = toy_files
    run(capsys, "build-kg", "--triples", tsv, "--kg", tmp / "k.dkg")
    code, out, _ = run(
        capsys, "train", "--kg", tmp / "k.dkg", "--dataset", ds, "--checkpoint", tmp / "m.dkm", "--steps", 0
    )
    assert code == 0
    assert (tmp / "m.dkm").read_bytes()[:4] == b"DKM1"
    assert out.splitlines()[0].startswith("step=0 loss=")


def test_metrics_log_reproduces_summary(trained_toy):
    tmp, _, _, out = trained_toy
    lines = (tmp / "log.txt").read_text(encoding="utf-8").splitlines()
    assert [parse_log_line(ln)[0] for ln in lines] == [0, 100, 200, 300]
    assert out.splitlines()[-1] == cli.summarize_log(lines)


def test_eval_report_and_determinism(capsys, trained_toy):
    tmp, kg, ds, _ = trained_toy
    args = ["eval", "--kg", kg, "--dataset", ds, "--checkpoint", tmp / "m.dkm", "--dim", 16]
    code, out1, _ = run(capsys, *args, "--report", tmp / "r1.json")
    assert code == 0
    code, out2, _ = run(capsys, *args, "--report", tmp / "r2.json", "--workers", 3)
    assert out1 == out2
    assert (tmp / "r1.json").read_bytes() == (tmp / "r2.json").read_bytes()
    import json

    rep = json.loads((tmp / "r1.json").read_text(encoding="utf-8"))
    assert sum(rep["counts"].values()) == len(helpers.toy_training_samples())
    assert out1.startswith("hits1=")


def test_explain_two_entity_question(capsys, trained_toy):
    tmp, kg, ds, _ = trained_toy
    code, out, _ = run(
        capsys, "explain", "--kg", kg, "--dataset", ds, "--checkpoint", tmp / "m.dkm", "--index", 0
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "Q: who did natalie portman play in star wars episode ii"
    assert lines[1].startswith("NataliePortman → played [")
    assert lines[2].startswith("StarWarsII → character [")
    assert lines[3] == "Intersection → Padme (correct)"
    assert lines[4] == "A: Padme"
    import re

    probs = [float(p) for p in re.findall(r"\[([0-9.]+)\]", out)]
    assert probs and all(0 < p <= 1 for p in probs)


def test_explain_one_entity_question(capsys, trained_toy):
    tmp, kg, ds, _ = trained_toy
    code, out, _ = run(
        capsys, "explain", "--kg", kg, "--dataset", ds, "--checkpoint", tmp / "m.dkm", "--index", 5
    )
    assert code == 0
    assert "Intersection" not in out
    assert "→ Jerusalem (correct)" in out


def test_explain_index_out_of_range(capsys, trained_toy):
    tmp, kg, ds, _ = trained_toy
    code, _, err = run(
        capsys, "explain", "--kg", kg, "--dataset", ds, "--checkpoint", tmp / "m.dkm", "--index", 99
    )
    assert code == 1 and "out of range" in err


def test_eval_missing_checkpoint(capsys, toy_files):
    tmp, tsv, ds = toy_files
    run(capsys, "build-kg", "--triples", tsv, "--kg", tmp / "k.dkg")
    code, _, err = run(capsys, "eval", "--kg", tmp / "k.dkg", "--dataset", ds, "--checkpoint", tmp / "none")
    assert code == 1
    assert err.startswith("dkgqa eval: error: cannot read checkpoint")


def test_eval_requires_paths(capsys):
    code, _, err = run(capsys, "eval")
    assert code == 1 and "missing --kg" in err


def test_bad_config_value(capsys, tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("variant=nope\n", encoding="utf-8")
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and "variant" in err


def test_module_entry_point(tmp_path):
    tsv = tmp_path / "t.tsv"
    tsv.write_text(helpers.TOY_TSV, encoding="utf-8")
    proc = subprocess.run(
        [sys.executable, "-m", "dkgqa", "build-kg", "--triples", str(tsv), "--kg", str(tmp_path / "k")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and "triples=10" in proc.stdout
