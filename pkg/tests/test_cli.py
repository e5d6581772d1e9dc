import json
import subprocess
import sys
from pathlib import Path

import pytest

from foldpref.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, blob_digest, main, read_scores

FAST = ["--steps", "4", "--batch-size", "8", "--diffusion-steps", "5"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("FOLDPREF_OUTPUT_DIR", str(tmp_path / "runs"))
    return tmp_path


def only_run(root: Path, prefix: str) -> Path:
    dirs = sorted(p for p in (root / "runs").iterdir() if p.name.startswith(prefix))
    return dirs[-1]


def gen(tmp, pref, n=4, seed=0, name=None, extra=()):
    out = tmp / (name or f"{pref}.jsonl")
    code = main(["gen-data", "--garment", "trousers", "--pref", pref, "--n", str(n),
                 "--seed", str(seed), "--out", str(out), *extra])
    assert code == EXIT_OK
    return out


@pytest.fixture
def data(runs):
    return {p: gen(runs, p, seed=i) for i, p in enumerate(("pref_1", "pref_2", "pref_3"))}


@pytest.fixture
def ref_ckpt(runs, data):
    ckpt = runs / "ref.ckpt"
    assert main(["train", "ref", "--data", str(data["pref_3"]), "--out", str(ckpt), *FAST]) == EXIT_OK
    return ckpt


def test_gen_data_outputs(runs):
    out = gen(runs, "pref_1", n=3, extra=["--takeover", "2"])
    manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
    assert manifest["counts"] == {"pref_1/standard": 3, "pref_1/takeover": 2}
    cfg = json.loads(Path(str(out) + ".config.json").read_text())
    assert cfg["command"] == "gen-data" and cfg["takeover"] == 2


def test_gen_data_is_byte_identical(runs):
    a = gen(runs, "pref_2", seed=5, name="a.jsonl")
    b = gen(runs, "pref_2", seed=5, name="b.jsonl")
    assert a.read_bytes() == b.read_bytes()


def test_missing_required_option(runs, capsys):
    assert main(["gen-data", "--garment", "trousers", "--pref", "pref_1"]) == EXIT_USAGE
    assert "--out" in capsys.readouterr().err


def test_unknown_command_and_garment(runs):
    assert main(["fold"]) == EXIT_USAGE
    assert main(["gen-data", "--garment", "scarf", "--pref", "pref_1", "--out", str(runs / "x.jsonl")]) == EXIT_USAGE


def test_train_ref_run_directory(runs, data, ref_ckpt):
    run = only_run(runs, "train-ref-")
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["command"] == "train ref" and cfg["steps"] == 4 and cfg["K"] == 5
    log = (run / "run.log").read_text()
    assert blob_digest(data["pref_3"]) in log
    assert len((run / "losses.tsv").read_text().splitlines()) == 5


def test_blob_digest_matches_git(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"hello\n")
    # `git hash-object` of "hello\n"
    assert blob_digest(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_train_pref_and_eval(runs, data, ref_ckpt):
    out = runs / "rko.ckpt"
    assert main(["train", "pref", "--method", "rko", "--win", str(data["pref_1"]), "--lose", str(data["pref_2"]),
                 "--ref", str(ref_ckpt), "--out", str(out), "--eval-every", "2", "--holdout-fraction", "0.25",
                 *FAST]) == EXIT_OK
    run = only_run(runs, "train-pref-")
    assert (run / "gaps.tsv").read_text().splitlines()[0] == "step\tgap"
    assert main(["eval", "--ckpt", str(out), "--garment", "trousers", "--pref", "pref_1"]) == EXIT_OK
    ev = only_run(runs, "eval-")
    rows = (ev / "report.tsv").read_text().splitlines()
    assert rows[0] == "run\tscore\ttermination" and len(rows) == 11
    report = json.loads((ev / "report.json").read_text())
    assert report["n"] == 10 and len(report["scores"]) == 10


def test_no_reweight_alias(runs, data, ref_ckpt):
    assert main(["train", "pref", "--no-reweight", "--win", str(data["pref_1"]), "--lose", str(data["pref_2"]),
                 "--ref", str(ref_ckpt), *FAST]) == EXIT_OK
    cfg = json.loads((only_run(runs, "train-pref-") / "config.json").read_text())
    assert cfg["method"] == "rko_norw"
    assert main(["train", "pref", "--method", "dpo", "--no-reweight", "--win", str(data["pref_1"]),
                 "--lose", str(data["pref_2"]), "--ref", str(ref_ckpt), *FAST]) == EXIT_USAGE


def test_winners_only_data_is_rejected(runs, data, ref_ckpt, capsys):
    code = main(["train", "pref", "--method", "rpo", "--win", str(data["pref_1"]), "--ref", str(ref_ckpt), *FAST])
    assert code == EXIT_DATA
    assert "winners only" in capsys.readouterr().err


def test_ddpm_baseline_needs_no_reference(runs, data):
    assert main(["train", "pref", "--method", "ddpm", "--win", str(data["pref_1"]), *FAST]) == EXIT_OK


def test_corrupt_inputs(runs, data, ref_ckpt):
    data["pref_1"].write_bytes(data["pref_1"].read_bytes()[:-10])
    assert main(["train", "ref", "--data", str(data["pref_1"]), *FAST]) == EXIT_DATA
    bad = runs / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--ckpt", str(bad), "--garment", "trousers", "--pref", "pref_1"]) == EXIT_DATA
    assert main(["eval", "--ckpt", str(runs / "missing.ckpt"), "--garment", "trousers",
                 "--pref", "pref_1"]) == EXIT_DATA


def test_config_file_round_trip_is_bit_identical(runs, data):
    a = runs / "a.ckpt"
    assert main(["train", "ref", "--data", str(data["pref_3"]), "--out", str(a), *FAST]) == EXIT_OK
    cfg = json.loads((only_run(runs, "train-ref-") / "config.json").read_text())
    b = runs / "b.ckpt"
    cfg["out"] = str(b)
    cfg_path = runs / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["train", "ref", "--config", str(cfg_path)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    runs_ref = sorted(p for p in (runs / "runs").iterdir() if p.name.startswith("train-ref-"))
    assert (runs_ref[0] / "losses.tsv").read_bytes() == (runs_ref[1] / "losses.tsv").read_bytes()


def test_flags_override_config(runs, data):
    cfg_path = runs / "cfg.json"
    cfg_path.write_text(json.dumps({"steps": 7, "batch_size": 8, "K": 5}))
    assert main(["train", "ref", "--config", str(cfg_path), "--data", str(data["pref_3"]), "--steps", "2"]) == EXIT_OK
    assert json.loads((only_run(runs, "train-ref-") / "config.json").read_text())["steps"] == 2


@pytest.mark.parametrize("content", [{"stepz": 3}, {"command": "eval"}, [1, 2]])
def test_bad_config(runs, data, content):
    cfg_path = runs / "cfg.json"
    cfg_path.write_text(json.dumps(content))
    assert main(["train", "ref", "--config", str(cfg_path), "--data", str(data["pref_3"])]) == EXIT_USAGE


def test_abtest(runs, capsys):
    a, b = runs / "a.txt", runs / "b.txt"
    a.write_text("\n".join(["1.0"] * 7 + ["0.2"] * 3) + "\n")
    b.write_text("run\tscore\ttermination\n" + "".join(f"{i}\t{s}\tcompleted\n" for i, s in
                                                        enumerate([0.9] * 4 + [0.1] * 6)))
    assert main(["abtest", str(a), str(b)]) == EXIT_OK
    out = json.loads((only_run(runs, "abtest-") / "abtest.json").read_text())
    assert out["a"] == [7, 10] and out["b"] == [4, 10]
    assert 0.9 < out["p_a_greater"] < 0.95
    assert main(["abtest", str(a), str(runs / "nope.txt")]) == EXIT_DATA
    assert main(["abtest", str(a), str(b), "--threshold", "1.5"]) == EXIT_USAGE


def test_read_scores_rejects_garbage(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("name,value\nx,1\n")
    with pytest.raises(ValueError):
        read_scores(str(p))


def test_sweep(runs, data, ref_ckpt):
    assert main(["sweep", "--methods", "ddpm,rko", "--counts", "2,4", "--win", str(data["pref_1"]),
                 "--lose", str(data["pref_2"]), "--ref", str(ref_ckpt), "--garment", "trousers",
                 "--pref", "pref_1", "--runs", "2", *FAST]) == EXIT_OK
    run = only_run(runs, "sweep-")
    assert len((run / "results.tsv").read_text().splitlines()) == 5
    assert set(json.loads((run / "plot.json").read_text())) == {"ddpm", "rko"}
    assert main(["sweep", "--methods", "ddpm,ppo", "--win", str(data["pref_1"]), "--lose", str(data["pref_2"]),
                 "--ref", str(ref_ckpt), "--garment", "trousers", "--pref", "pref_1"]) == EXIT_USAGE


def test_check_command(runs):
    assert main(["check", "--gradient-batches", "2"]) == EXIT_OK
    text = (only_run(runs, "check-") / "check.txt").read_text()
    assert "FAIL" not in text


def test_check_catches_injected_sign_error(runs):
    assert main(["check", "--gradient-batches", "1", "--inject-fault", "dpo-sign"]) == EXIT_NUMERIC
    text = (only_run(runs, "check-") / "check.txt").read_text()
    assert "FAIL direction/dpo" in text
    # the patch is undone afterwards
    assert main(["check", "--gradient-batches", "1"]) == EXIT_OK


def test_console_entry_point(runs):
    proc = subprocess.run([sys.executable, "-m", "foldpref.cli", "abtest"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
