import csv
import json

import pytest

from deltalora import checkpoint
from deltalora.cli import main

BASE = {
    "eta": 0.01,
    "T": 12,
    "mode": "delta_lora",
    "beta": 0.01,
    "K": 3,
    "lambda": 2.0,
    "r": 2,
    "alpha": 4,
    "seed": 1,
    "batch_size": 8,
    "model": {"d_model": 8, "heads": 2, "d_ff": 16, "layers": 1, "seq_len": 4},
    "task": {"kind": "teacher_student", "n_train": 32, "n_eval": 16, "perturb_rank": 4},
}


@pytest.fixture
def config(tmp_path):
    def make(**changes):
        cfg = json.loads(json.dumps(BASE))
        for k, v in changes.items():
            if v is None:
                cfg.pop(k, None)
            else:
                cfg[k] = v
        p = tmp_path / "config.json"
        p.write_text(json.dumps(cfg))
        return str(p)
    return make


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_train_writes_all_outputs(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config(), "--out", str(out)]) == 0
    rows = read_jsonl(out / "metrics.jsonl")
    assert len(rows) == 12
    assert set(rows[0]) == {"step", "loss", "lr", "mode", "run_id"}
    assert {r["mode"] for r in rows} == {"delta_lora"}
    echo = json.loads((out / "config.json").read_text())
    result = json.loads((out / "result.json").read_text())
    _, meta = checkpoint.load(out / "checkpoint.bin")
    assert echo == result["config"] == meta["config"]
    assert echo["lambda"] == 2.0 and echo["out_dir"] == str(out)
    assert meta["step"] == 12


def test_missing_eta_is_a_config_error(config, tmp_path, capsys):
    assert main(["train", "--config", config(eta=None), "--out", str(tmp_path / "r")]) == 2
    assert "eta" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("bad", [
    {"etaa": 1.0},
    {"mode": "qlora"},
    {"T": -1},
    {"task": {"kind": "char_lm"}},
    {"task": {"kind": "teacher_student", "corpus_path": "x"}},
    {"model": {"d_model": 8, "heads": 3}},
])
def test_invalid_configs_exit_2(config, tmp_path, bad):
    assert main(["train", "--config", config(**bad), "--out", str(tmp_path / "r")]) == 2


def test_unreadable_config_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["train", "--config", str(p)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_zero_steps(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config(T=0), "--out", str(out)]) == 0
    assert (out / "metrics.jsonl").read_text() == ""
    tensors, meta = checkpoint.load(out / "checkpoint.bin")
    assert meta["step"] == 0 and tensors


def test_rerun_gives_identical_metrics(config, tmp_path):
    # out_dir is part of the config echo, so both runs write to the same place in turn
    cfg, out, first = config(), tmp_path / "run", tmp_path / "first"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    out.rename(first)
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    for name in ("metrics.jsonl", "checkpoint.bin", "result.json", "config.json"):
        assert (out / name).read_bytes() == (first / name).read_bytes(), name


def test_seed_and_set_overrides(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", config(), "--out", str(out), "--seed", "7",
                 "--set", "lambda=0.5", "--set", "task.n_train=16"]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 7 and echo["lambda"] == 0.5 and echo["task"]["n_train"] == 16


def test_bad_override_exit_2(config, tmp_path):
    assert main(["train", "--config", config(), "--set", "lambda"]) == 2
    assert main(["train", "--config", config(), "--set", "lambda=\"big\""]) == 2


def test_resume_matches_single_run(config, tmp_path):
    cfg = config()
    full, part, rest = tmp_path / "full", tmp_path / "part", tmp_path / "rest"
    same = ["--set", f"out_dir={json.dumps(str(tmp_path / 'x'))}"]
    assert main(["train", "--config", cfg, *same]) == 0
    (tmp_path / "x").rename(full)
    assert main(["train", "--config", cfg, *same, "--stop-at", "5"]) == 0
    (tmp_path / "x").rename(part)
    assert main(["train", "--config", cfg, *same, "--resume", str(part / "checkpoint.bin")]) == 0
    (tmp_path / "x").rename(rest)
    assert checkpoint.tensor_digest(full / "checkpoint.bin") == checkpoint.tensor_digest(rest / "checkpoint.bin")
    assert read_jsonl(part / "metrics.jsonl") + read_jsonl(rest / "metrics.jsonl") == read_jsonl(full / "metrics.jsonl")


def test_resume_from_garbage_exit_2(config, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 4)
    assert main(["train", "--config", config(), "--resume", str(bad), "--out", str(tmp_path / "r")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(config, tmp_path, capsys):
    cfg = config(eta=1e12, mode="full_ft", T=50)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert "numerical" in capsys.readouterr().err


# -- verify ------------------------------------------------------------------


def test_verify_passes(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 7 and "FAIL" not in out


def test_verify_detects_injected_dropout(capsys):
    assert main(["verify", "--quick", "--inject-dropout", "0.5"]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert any(l.startswith("[FAIL]") and "gradient_identity" in l for l in lines)


def test_verify_zero_tolerance_fails(capsys):
    assert main(["verify", "--quick", "--tol", "0"]) == 1
    out = capsys.readouterr().out
    for name in ("gradient_identity", "delta_expansion", "merge_equivalence", "finite_difference", "telescoping"):
        assert any(l.startswith("[FAIL]") and name in l for l in out.splitlines()), name


def test_verify_unknown_tolerance_exit_2():
    assert main(["verify", "--quick", "--tol", "nonsense=1"]) == 2


# -- compare and sweep -------------------------------------------------------


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_compare_lora_only(config, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", config(modes=["lora"]), "--out", str(out)]) == 0
    rows = read_csv(out / "cosine.csv")
    assert {r["mode"] for r in rows} == {"lora"}
    assert all(float(r["cosine"]) < 1.0 for r in rows)
    assert len(read_jsonl(out / "cosine.jsonl")) == len(rows)
    assert [r["mode"] for r in read_csv(out / "comparison.csv")] == ["lora"]


def test_compare_zero_lambda_duplicates_lora(config, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", config(modes=["lora", "delta_lora"]), "--out", str(out),
                 "--set", "lambda=0"]) == 0
    a = [r["loss"] for r in read_jsonl(out / "lora" / "metrics.jsonl")]
    b = [r["loss"] for r in read_jsonl(out / "delta_lora" / "metrics.jsonl")]
    assert a == b
    table = {r["mode"]: r for r in read_csv(out / "comparison.csv")}
    assert table["lora"]["final_eval_metric"] == table["delta_lora"]["final_eval_metric"]


def test_compare_zero_steps(config, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", config(T=0, modes=["lora", "delta_lora", "ft_qv", "full_ft"]),
                 "--out", str(out)]) == 0
    assert all(float(r["cosine"]) == 1.0 for r in read_csv(out / "cosine.csv"))


def test_sweep_writes_table_in_order(config, tmp_path, monkeypatch):
    monkeypatch.setenv("DELTA_LORA_THREADS", "2")
    out = tmp_path / "sw"
    assert main(["sweep", "--config", config(), "--out", str(out), "--param", "lambda", "--values", "2,0,1"]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [float(r["lambda"]) for r in rows] == [2.0, 0.0, 1.0]
    echo = json.loads((out / "lambda=0" / "config.json").read_text())
    assert echo["lambda"] == 0.0
    assert main(["sweep", "--config", config(), "--out", str(out), "--param", "K", "--values", "1,100"]) == 0
    assert [r["K"] for r in read_csv(out / "sweep.csv")] == ["1", "100"]


def test_sweep_rejects_bad_values(config, tmp_path):
    assert main(["sweep", "--config", config(), "--out", str(tmp_path), "--param", "K", "--values", "a,b"]) == 2
    assert main(["sweep", "--config", config(), "--out", str(tmp_path), "--param", "K", "--values", ","]) == 2
