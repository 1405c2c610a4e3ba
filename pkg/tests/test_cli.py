import json
from pathlib import Path

import numpy as np
import pytest
import torch

from hybrid_distill.checkpoint import CheckpointError, Provenance, load_checkpoint, save_checkpoint
from hybrid_distill.cli import IMPORTANCE_COLUMNS, MEMORY_COLUMNS, main, read_csv
from hybrid_distill.config import ConfigError, load_config, parse_config_text, schema_text
from hybrid_distill.distill import TRACE_COLUMNS
from hybrid_distill.model import HybridLayout, HybridLM, ModelConfig

TINY = """
[model]
n_layers = 2
n_heads = 4
d_model = 16
max_T = 24

[task]
n_keys = 6
n_values = 6
min_pairs = 2
max_pairs = 4
seq_len = 19

[teacher]
steps = 6
batch_size = 8
log_every = 2
eval_every = 2
target_acc = 0.0

[distill]
align_steps = 2
kd_steps = 2
batch_size = 4
log_every = 1
eval_every = 2

[placement]
budget = 2

[eval]
probe_size = 24
ppl_size = 8
memory_L = 24

[sweep]
ks = 0, 2
seeds = 0
d_states = 2, 1
"""


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def run(cfg_file, out, *verb):
    return main(["--config", str(cfg_file), "--out", str(out), *verb])


def header(path):
    return path.read_text().splitlines()[0].split(",")


# --- config ------------------------------------------------------------------------


def test_config_rejects_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="unknown key 'n_layer'"):
        parse_config_text("[model]\nn_layer = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[model]\nn_layers = three\n")


def test_config_defaults_and_schema_round_trip():
    default = load_config(None)
    assert default.model == ModelConfig(n_layers=4, n_heads=8, d_model=64, vocab_size=53, max_T=64)
    assert parse_config_text(schema_text()) == default


def test_config_validates_lengths():
    with pytest.raises(ConfigError, match="max_T"):
        parse_config_text("[model]\nmax_T = 20\n")


# --- checkpoint --------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    cfg = ModelConfig(n_layers=2, n_heads=4, d_model=16, max_T=16, d_state=3)
    model = HybridLM(cfg, HybridLayout(((1, 2), ())), seed=5)
    save_checkpoint(model, tmp_path / "a", Provenance("kd", 7, 1, "ab" * 32))
    loaded, manifest = load_checkpoint(tmp_path / "a")
    assert all(torch.equal(p, q) for p, q in zip(model.state_dict().values(), loaded.state_dict().values()))
    save_checkpoint(loaded, tmp_path / "b", Provenance("kd", 7, 1, "ab" * 32))
    for f in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert manifest["layout"] == [[1, 2], []]
    assert manifest["provenance"]["teacher_sha256"] == "ab" * 32
    assert manifest["provenance"]["stage"] == "kd" and manifest["provenance"]["step"] == 7


def test_checkpoint_blob_is_little_endian_f64(tmp_path):
    model = HybridLM(ModelConfig(n_layers=1, n_heads=2, d_model=4, max_T=4), seed=0)
    save_checkpoint(model, tmp_path, Provenance("teacher"))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    blob = (tmp_path / "tensors.bin").read_bytes()
    entry = next(e for e in manifest["tensors"] if e["name"] == "tok_emb")
    arr = np.frombuffer(blob[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f8")
    assert np.array_equal(arr.reshape(entry["shape"]), model.tok_emb.detach().numpy())
    assert len(blob) == sum(e["nbytes"] for e in manifest["tensors"])


def test_checkpoint_rejects_version_and_corruption(tmp_path):
    model = HybridLM(ModelConfig(n_layers=1, n_heads=2, d_model=4, max_T=4), seed=0)
    save_checkpoint(model, tmp_path, Provenance("teacher"))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)
    save_checkpoint(model, tmp_path, Provenance("teacher"))
    blob = bytearray((tmp_path / "tensors.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path)


# --- verbs -------------------------------------------------------------------------


def test_missing_config_is_exit_1(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path), "memory-report"]) == 1
    assert "nope.ini" in capsys.readouterr().err


def test_usage_errors_are_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--out", str(tmp_path), "score-heads"]) == 1  # no teacher checkpoint yet


def test_unknown_config_key_is_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\nwidth = 3\n")
    assert main(["--config", str(p), "--out", str(tmp_path), "memory-report"]) == 1
    assert "width" in capsys.readouterr().err


def test_memory_report(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "memory-report"]) == 0
    text = capsys.readouterr().out
    assert "11.0 MB" in text and "134.2 MB" in text
    assert header(tmp_path / "memory.csv") == list(MEMORY_COLUMNS)
    rows = read_csv(tmp_path / "memory.csv")
    assert len(rows) == 4 * 3


def test_convergence_failure_is_exit_2(tmp_path):
    p = tmp_path / "strict.ini"
    p.write_text(TINY.replace("target_acc = 0.0", "target_acc = 1.0"))
    assert main(["--config", str(p), "--out", str(tmp_path / "o"), "train-teacher"]) == 2
    assert (tmp_path / "o" / "teacher" / "manifest.json").exists()


def test_full_pipeline_and_determinism(cfg_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(cfg_file, out, "train-teacher") == 0
        assert run(cfg_file, out, "score-heads") == 0
        assert run(cfg_file, out, "build-hybrid") == 0
        assert run(cfg_file, out, "distill") == 0
        assert run(cfg_file, out, "evaluate") == 0
        assert run(cfg_file, out, "sweep", "--kind", "k") == 0
        assert run(cfg_file, out, "sweep", "--kind", "d_state") == 0
        outs.append(out)
    a, b = outs
    artifacts = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.suffix != ".log")
    assert len(artifacts) >= 12
    for rel in artifacts:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    assert header(a / "teacher_metrics.csv") == list(TRACE_COLUMNS)
    assert header(a / "student_metrics.csv") == list(TRACE_COLUMNS)
    assert header(a / "importance.csv") == list(IMPORTANCE_COLUMNS)
    imp = read_csv(a / "importance.csv")
    assert len(imp) == 8
    accs = [float(r["ablated_acc"]) for r in imp]
    assert accs == sorted(accs)

    manifest = json.loads((a / "student_init" / "manifest.json").read_text())
    top2 = sorted((int(r["layer"]), int(r["head"])) for r in imp[:2])
    assert sorted(tuple(h) for h in HybridLayout(tuple(map(tuple, manifest["layout"]))).heads) == top2
    teacher_manifest = json.loads((a / "teacher" / "manifest.json").read_text())
    assert manifest["provenance"]["teacher_sha256"] == teacher_manifest["blob_sha256"]

    sweep = read_csv(a / "sweep_k.csv")
    assert [int(r["k"]) for r in sweep] == [0, 2]
    assert len(read_csv(a / "sweep_d_state.csv")) == 2


def test_teacher_checkpoint_reload_gives_same_probe_accuracy(cfg_file, tmp_path):
    from hybrid_distill.ablation import probe_accuracy
    from hybrid_distill.experiments import eval_sets, run_teacher

    config = load_config(cfg_file)
    model, trace, _ = run_teacher(config)
    save_checkpoint(model, tmp_path / "t", Provenance("teacher"))
    loaded, _ = load_checkpoint(tmp_path / "t")
    probe = eval_sets(config).probe
    assert probe_accuracy(model, probe) == probe_accuracy(loaded, probe)


def test_build_hybrid_full_and_empty(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_file, out, "train-teacher") == 0
    assert run(cfg_file, out, "score-heads") == 0
    assert run(cfg_file, out, "build-hybrid", "--k", "0") == 0
    assert json.loads((out / "student_init" / "manifest.json").read_text())["layout"] == [[], []]
    assert run(cfg_file, out, "build-hybrid", "--k", "8") == 0
    teacher, _ = load_checkpoint(out / "teacher")
    student, _ = load_checkpoint(out / "student_init")
    tokens = torch.randint(0, teacher.cfg.vocab_size, (3, 12), generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(teacher(tokens), student(tokens))
    assert run(cfg_file, out, "build-hybrid", "--k", "9") == 1


def test_evaluate_teacher_against_itself(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_file, out, "train-teacher") == 0
    assert run(cfg_file, out, "evaluate", "--model", str(out / "teacher")) == 0
    row = read_csv(out / "evaluation.csv")[0]
    assert row["coverage_retrieval"] == ("100.0" if float(row["probe_acc"]) > 0 else "")
    assert float(row["coverage_knowledge"]) == 100.0


def test_global_flags_after_verb(cfg_file, tmp_path):
    assert main(["memory-report", "--out", str(tmp_path / "x"), "--seed", "3"]) == 0
    assert (tmp_path / "x" / "memory.csv").exists()
