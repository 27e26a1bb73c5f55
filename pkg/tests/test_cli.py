import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from forgetkit.cli import main
from forgetkit.dataformat import VocabLayout, Word, deinterleave
from forgetkit.lora import LoraAdapter, write_adapters
from forgetkit.tensor_store import Checkpoint, read_checkpoint, write_checkpoint

from oracles import ties_reference

LAYOUT = VocabLayout(text_vocab_size=900, speech_token_count=10_000)


def write_thetas(tmp_path, ckpts):
    for k, ck in enumerate(ckpts):
        write_checkpoint(ck, tmp_path / f"theta{k}.ckpt")


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


# -- merge ------------------------------------------------------------------------

def test_merge_linear_preset_on_equal_checkpoints(tmp_path, capsys):
    ck = Checkpoint({"w": np.random.default_rng(0).normal(size=(3, 3)), "b": np.arange(3.0)})
    write_thetas(tmp_path, [ck] * 4)
    assert main(["merge", "linear", str(tmp_path / "out.ckpt"), "--models-dir", str(tmp_path)]) == 0
    out = read_checkpoint(tmp_path / "out.ckpt")
    # the preset weights sum to one, so equal inputs come back up to f32 rounding
    for n in ck.names():
        np.testing.assert_allclose(out[n], ck[n], rtol=1e-6, atol=1e-7)
    text = capsys.readouterr().out
    assert "linear merge of 4 model(s)" in text and "max|delta|" in text


def test_merge_ties_preset_matches_oracle(tmp_path):
    rng = np.random.default_rng(1)
    vals = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    ckpts = [Checkpoint({"w": rng.choice(vals, size=(2, 5))}) for _ in range(4)]
    write_thetas(tmp_path, ckpts)
    assert main(["merge", "ties", str(tmp_path / "out.ckpt"), "--models-dir", str(tmp_path)]) == 0
    out = read_checkpoint(tmp_path / "out.ckpt")
    base = ckpts[0]["w"].ravel().tolist()
    models = [c["w"].ravel().tolist() for c in ckpts[1:]]
    expect = ties_reference(base, models, [0.04, 0.06, 0.9], [0.9] * 3)
    np.testing.assert_array_equal(out["w"].ravel(), np.array(expect, dtype=np.float32))
    assert out.metadata["merge.method"] == "ties"


def test_merge_spec_file_resolves_relative_paths(tmp_path):
    ck = Checkpoint({"w": np.ones(2)})
    write_thetas(tmp_path, [ck, ck])
    spec = {"method": "linear", "models": [{"path": "theta0.ckpt", "weight": 0.5}, {"path": "theta1.ckpt", "weight": 0.5}]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["merge", str(tmp_path / "spec.json"), str(tmp_path / "o.ckpt")]) == 0
    np.testing.assert_array_equal(read_checkpoint(tmp_path / "o.ckpt")["w"], [1.0, 1.0])


def test_merge_missing_checkpoint_names_path(tmp_path, capsys):
    code = main(["merge", "linear", str(tmp_path / "o.ckpt"), "--models-dir", str(tmp_path)])
    assert code == 2
    assert "theta0.ckpt" in capsys.readouterr().err
    assert not (tmp_path / "o.ckpt").exists()


def test_merge_bad_spec(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"method": "soup", "models": []}))
    assert main(["merge", str(tmp_path / "s.json"), str(tmp_path / "o.ckpt")]) == 2
    (tmp_path / "s.json").write_text("{")
    assert main(["merge", str(tmp_path / "s.json"), str(tmp_path / "o.ckpt")]) == 2


def test_merge_incompatible(tmp_path, capsys):
    write_checkpoint(Checkpoint({"w": np.ones(2)}), tmp_path / "theta0.ckpt")
    write_checkpoint(Checkpoint({"w": np.ones(3)}), tmp_path / "theta1.ckpt")
    spec = {"method": "linear", "models": [{"path": "theta0.ckpt", "weight": 0.5}, {"path": "theta1.ckpt", "weight": 0.5}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["merge", str(tmp_path / "s.json"), str(tmp_path / "o.ckpt")]) == 2
    assert "w" in capsys.readouterr().err


# -- fold-lora --------------------------------------------------------------------

@pytest.fixture
def lora_files(tmp_path):
    rng = np.random.default_rng(2)
    W = rng.normal(size=(6, 5))
    base = Checkpoint({"layer.q": W, "layer.norm": np.ones(6)})
    write_checkpoint(base, tmp_path / "base.ckpt")
    ad = LoraAdapter(rng.normal(size=(4, 5)), rng.normal(size=(6, 4)), 16.0, "layer.q")
    write_adapters({"layer.q": ad}, tmp_path / "ad.ckpt")
    return tmp_path, read_checkpoint(tmp_path / "base.ckpt")


def test_fold_lora_alpha_ratio(lora_files):
    d, base = lora_files
    assert main(["fold-lora", str(d / "base.ckpt"), str(d / "ad.ckpt"), str(d / "f16.ckpt")]) == 0
    assert main(["fold-lora", str(d / "base.ckpt"), str(d / "ad.ckpt"), str(d / "f14.ckpt"), "--alpha", "14"]) == 0
    f16, f14 = read_checkpoint(d / "f16.ckpt"), read_checkpoint(d / "f14.ckpt")
    W = base["layer.q"].astype(np.float64)
    np.testing.assert_allclose(f14["layer.q"] - W, (14 / 16) * (f16["layer.q"] - W), atol=1e-6, rtol=0)
    assert f16.metadata["lora.alpha_eff"] == "16.0" and f14.metadata["lora.alpha_eff"] == "14.0"
    np.testing.assert_array_equal(f14["layer.norm"], base["layer.norm"])


def test_fold_lora_missing_target(lora_files, capsys):
    d, _ = lora_files
    write_checkpoint(Checkpoint({"other": np.ones(2)}), d / "b2.ckpt")
    assert main(["fold-lora", str(d / "b2.ckpt"), str(d / "ad.ckpt"), str(d / "o.ckpt")]) == 2
    assert "layer.q" in capsys.readouterr().err


def test_fold_lora_negative_alpha_is_usage_error(lora_files):
    d, _ = lora_files
    assert main(["fold-lora", str(d / "base.ckpt"), str(d / "ad.ckpt"), str(d / "o.ckpt"), "--alpha", "-1"]) == 1


# -- replay-plan ------------------------------------------------------------------

def test_replay_plan_fifty(capsys):
    assert main(["replay-plan", "20000", "5000", "10000", "--s", "0.005"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["per_source"] == {"0": 50, "1": 50} and plan["i"] == 2


def test_replay_plan_zero(capsys):
    assert main(["replay-plan", "10", "10", "10", "--s", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["per_source"] == {"0": 0, "1": 0}


def test_replay_plan_cap(capsys):
    assert main(["replay-plan", "3", "40", "10000", "--s", "0.005", "--seed", "4"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["per_source"] == {"0": 3, "1": 40} and plan["seed"] == 4


@pytest.mark.parametrize("argv", [["replay-plan", "10"], ["replay-plan", "10", "10", "--s", "2"], ["replay-plan", "10", "0"], ["replay-plan", "10", "10", "--i", "5"], ["replay-plan", "x"]])
def test_replay_plan_bad_args(argv):
    assert main(argv) == 1


def test_replay_plan_with_manifests(tmp_path):
    paths = []
    for j, n in enumerate([400, 300, 1000]):
        p = tmp_path / f"d{j}.jsonl"
        write_jsonl(p, [{"id": f"d{j}-{k}", "dataset_label": f"D{j}", "stage": f"s{j}", "task": "text", "payload_ref": ""} for k in range(n)])
        paths.append(str(p))
    out = tmp_path / "aug.jsonl"
    assert main(["replay-plan", "--s", "0.005", "--manifests", *paths, "--out", str(out), "--plan-out", str(tmp_path / "plan.json")]) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(rows) == 1010 and len({r["id"] for r in rows}) == 1010
    assert json.loads((tmp_path / "plan.json").read_text())["per_source"] == {"0": 5, "1": 5}
    assert main(["replay-plan", "--manifests", *paths]) == 1
    assert main(["replay-plan", "--manifests", str(tmp_path / "nope.jsonl"), "--out", str(out)]) == 2


# -- format -----------------------------------------------------------------------

def test_format_tts_fixture(tmp_path):
    write_jsonl(tmp_path / "in.jsonl", [{"id": "a", "instruction": [1, 2, 3], "words": [{"t": [10, 11], "s": [900]}, {"t": [12], "s": [901, 902]}]}])
    assert main(["format", "--task", "tts", str(tmp_path / "in.jsonl"), str(tmp_path / "out.jsonl")]) == 0
    row = json.loads((tmp_path / "out.jsonl").read_text())
    assert row["response"] == [10, 11, 900, 12, 901, 902]
    assert row["prompt"] == [1, 2, 3, 10, 11, 12]


def test_format_sqa_reports_line_errors(tmp_path, capsys):
    good = {"question_speech": [900], "question_text": [10], "words": [{"t": [20], "s": [910]}]}
    rows = [good, {"question_speech": [900], "question_text": [10]}, good]
    write_jsonl(tmp_path / "in.jsonl", rows)
    (tmp_path / "in.jsonl").write_text((tmp_path / "in.jsonl").read_text() + "not json\n")
    assert main(["format", "--task", "sqa", str(tmp_path / "in.jsonl"), str(tmp_path / "out.jsonl")]) == 2
    err = capsys.readouterr().err
    assert "in.jsonl:2:" in err and "words" in err and "in.jsonl:4:" in err
    assert len((tmp_path / "out.jsonl").read_text().splitlines()) == 2


def test_format_task_mismatch(tmp_path):
    write_jsonl(tmp_path / "in.jsonl", [{"task": "asr", "instruction": [1], "response": [2]}])
    assert main(["format", "--task", "text", str(tmp_path / "in.jsonl"), str(tmp_path / "o.jsonl")]) == 2


def test_format_fuzzed_lines_satisfy_invariants(tmp_path):
    (tmp_path / "layout.json").write_text(json.dumps(LAYOUT.to_json()))
    rng = np.random.default_rng(3)

    def words():
        return [{"t": rng.integers(0, 900, rng.integers(1, 4)).tolist(), "s": rng.integers(900, 10_900, rng.integers(1, 6)).tolist()} for _ in range(rng.integers(1, 8))]

    tts = [{"id": f"t{k}", "instruction": rng.integers(0, 900, 3).tolist(), "words": words()} for k in range(500)]
    sqa = [{"id": f"q{k}", "question_speech": rng.integers(900, 10_900, 4).tolist(), "question_text": rng.integers(0, 900, 3).tolist(), "words": words()} for k in range(500)]
    for task, rows in (("tts", tts), ("sqa", sqa)):
        write_jsonl(tmp_path / f"{task}.jsonl", rows)
        args = ["format", "--task", task, "--layout", str(tmp_path / "layout.json"), str(tmp_path / f"{task}.jsonl"), str(tmp_path / f"{task}.out")]
        assert main(args) == 0
        outs = [json.loads(x) for x in (tmp_path / f"{task}.out").read_text().splitlines()]
        assert len(outs) == 500
        for raw, ex in zip(rows, outs):
            want = [Word(tuple(w["t"]), tuple(w["s"])) for w in raw["words"]]
            if task == "tts":
                assert deinterleave(ex["response"], LAYOUT) == want
                assert ex["prompt"][3:] == [t for t in ex["response"] if LAYOUT.is_text(t)]
            else:
                assert ex["prompt"] == raw["question_speech"]
                answer_text = [t for w in raw["words"] for t in w["t"]]
                n = len(raw["question_text"]) + len(answer_text)
                assert ex["response"][:n] == raw["question_text"] + answer_text
                assert deinterleave(ex["response"][n:], LAYOUT) == want


# -- simulate ---------------------------------------------------------------------

TINY = {"num_stages": 3, "dims": [6, 8, 3], "n_train": 60, "n_test": 30, "train": {"epochs": 1, "hidden": 8}}


def test_simulate_default_strategies(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    assert main(["--output-dir", str(tmp_path / "out"), "simulate", str(tmp_path / "cfg.json")]) == 0
    with open(tmp_path / "out" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["strategy"] for r in rows] == ["none", "replay", "merge-linear", "merge-ties", "merge-dare", "scale", "replay+merge", "replay+scale"]
    assert json.loads((tmp_path / "out" / "config.json").read_text())["num_stages"] == 3
    assert "final accuracy" in capsys.readouterr().out


def test_simulate_seeds_give_mean_and_std(tmp_path, monkeypatch):
    cfg = {**TINY, "strategies": ["none", "replay"]}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    monkeypatch.setenv("FORGETKIT_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["simulate", str(tmp_path / "cfg.json"), "--seeds", "3"]) == 0
    with open(tmp_path / "env_out" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"strategy"} | {f"stage{k}_{s}" for k in range(3) for s in ("mean", "std")}
    assert any(float(r["stage0_std"]) > 0 for r in rows)
    long = (tmp_path / "env_out" / "curves_long.csv").read_text().splitlines()
    assert len(long) == 1 + 2 * 3 * 3 * 3


@pytest.mark.parametrize("bad,field", [({"num_stages": "x"}, "num_stages"), ({"train": {"epochz": 1}}, "epochz"), ({"replay_ratio": 3}, "replay_ratio")])
def test_simulate_malformed_config(tmp_path, capsys, bad, field):
    (tmp_path / "cfg.json").write_text(json.dumps(bad))
    assert main(["--output-dir", str(tmp_path), "simulate", str(tmp_path / "cfg.json")]) == 2
    assert field in capsys.readouterr().err


# -- exit codes -------------------------------------------------------------------

def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["format", "in", "out"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_console_script_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "forgetkit.cli", *a], capture_output=True, text=True)
    assert run("replay-plan", "10", "10").returncode == 0
    assert run("replay-plan").returncode == 1
    bad = run("fold-lora", str(tmp_path / "a"), str(tmp_path / "b"), str(tmp_path / "c"))
    assert bad.returncode == 2 and "a" in bad.stderr
