import json

import numpy as np
import pytest

from covmeta import checkpoint as ckpt
from covmeta import experiment as ex
from covmeta import nets
from covmeta import taskgen as T
from covmeta.cli import main
from covmeta.config import ConfigError, RunConfig, preset_config

TINY = dict(hidden=(8, 8), bias_transform=2, latent=3, decoder_hidden=4, n_tasks=40, batch_size=4,
            epochs=1, eval_tasks=30, eval_query=20)


def tiny(algorithm="ours", **kw):
    return preset_config(algorithm, **dict(TINY, **kw))


# ---------------------------------------------------------------- config

def test_config_json_round_trip(tmp_path):
    cfg = tiny("mmaml-lite", inner_lr=0.003)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_and_mistyped_keys(tmp_path):
    with pytest.raises(ConfigError, match="inner_lrr"):
        RunConfig.from_dict({"inner_lrr": 0.1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"inner_steps": 2.5})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"first_order": "yes"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"hidden": [4, True]})
    (tmp_path / "bad.json").write_text("{ not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "bad.json")


@pytest.mark.parametrize("over", [{"algorithm": "protonet"}, {"variant": "cubic"}, {"batch_size": 0},
                                  {"eval_seed": 0}, {"inner_steps": -1}, {"encoder_bypass": True}])
def test_config_validation(over):
    with pytest.raises(ConfigError):
        RunConfig(**over)


def test_baseline_presets():
    assert preset_config("maml").alpha_r == 0 and preset_config("maml").alpha_kl == 0
    assert preset_config("mmaml-lite").encoder_input == "pairs"
    assert RunConfig().eval_tasks == 1000 and RunConfig().eval_query == 100


# ---------------------------------------------------------------- checkpoint

def trained(cfg, **kw):
    return ex.train(cfg, **kw)


def test_checkpoint_round_trip_byte_identical(tmp_path):
    cfg = tiny(n_tasks=8)
    st = trained(cfg)
    ex.save_checkpoint(tmp_path / "a.bin", cfg, st)
    ck = ckpt.load(tmp_path / "a.bin")
    ckpt.save(tmp_path / "b.bin", ck)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert ck.step == st.step == 2 and ck.config == cfg
    for k in st.params:
        assert np.array_equal(ck.params[k], st.params[k])
    assert np.array_equal(ck.adam.v, st.adam.v)


def test_checkpoint_truncation_and_magic(tmp_path):
    cfg = tiny(n_tasks=4)
    ex.save_checkpoint(tmp_path / "a.bin", cfg, ex.initial_state(cfg))
    blob = (tmp_path / "a.bin").read_bytes()
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.decode(blob[:-8])
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"NOTACKPT" + blob[8:])


def test_checkpoint_refuses_mismatched_parameters():
    cfg = tiny(n_tasks=4)
    st = ex.initial_state(cfg)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.encode(ckpt.Checkpoint(cfg.replace(hidden=(8, 9)), st.params, st.adam, 0))


# ---------------------------------------------------------------- training

def test_training_is_bit_identical_across_runs():
    cfg = tiny(n_tasks=12)
    a, b = trained(cfg), trained(cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.parametrize("algorithm", ["ours", "maml"])
def test_resume_equals_uninterrupted(tmp_path, algorithm):
    cfg = tiny(algorithm, n_tasks=20, epochs=2)
    full = trained(cfg, log_path=tmp_path / "full.jsonl")
    half = trained(cfg.replace(epochs=1), log_path=tmp_path / "half.jsonl", checkpoint_dir=tmp_path / "h")
    ck = ckpt.load(tmp_path / "h" / "checkpoint.bin")
    assert ck.step == 5
    rest = trained(cfg, resume=ck, log_path=tmp_path / "half.jsonl")
    assert rest.step == full.step == 10
    for k in full.params:
        assert np.array_equal(full.params[k], rest.params[k]), k
    a, b = ex.read_log(tmp_path / "full.jsonl"), ex.read_log(tmp_path / "half.jsonl")
    assert len(a) == len(b) == 10
    for x, y in zip(a, b):
        for f in ex.LOG_FIELDS:
            assert x[f] == pytest.approx(y[f], rel=1e-12, abs=1e-12)


def test_resume_refuses_a_different_config(tmp_path):
    cfg = tiny(n_tasks=8)
    ex.train(cfg, checkpoint_dir=tmp_path)
    with pytest.raises(ConfigError, match="inner_lr"):
        ex.train(cfg.replace(inner_lr=0.1), resume=ckpt.load(tmp_path / "checkpoint.bin"))


@pytest.mark.parametrize("algorithm", ["ours", "maml", "reptile", "mmaml-lite"])
def test_log_bookkeeping(tmp_path, algorithm):
    cfg = tiny(algorithm, n_tasks=12)
    ex.train(cfg, log_path=tmp_path / "log.jsonl")
    log = ex.read_log(tmp_path / "log.jsonl")
    assert [r["step"] for r in log] == [1, 2, 3]
    for r in log:
        assert set(r) == set(ex.LOG_FIELDS)
        total = cfg.alpha_l2 * r["l2"] + cfg.alpha_r * r["recon"] + cfg.alpha_kl * r["kl"] + r["task_nll"]
        assert r["total"] == pytest.approx(total, rel=1e-12, abs=1e-12)
        if algorithm in ("maml", "reptile"):
            assert r["recon"] == 0 and r["kl"] == 0


def test_periodic_checkpoints(tmp_path):
    cfg = tiny(n_tasks=12, checkpoint_every=2)
    ex.train(cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint-0000002.bin", "checkpoint.bin"]


def test_batches_cover_each_epoch_once():
    cfg = tiny(n_tasks=10, batch_size=3)
    seen = np.concatenate([ex.batch_indices(cfg, 10, s) for s in range(ex.steps_per_epoch(cfg, 10))])
    assert len(seen) == 9 and len(set(seen)) == 9
    assert not np.array_equal(ex.batch_indices(cfg, 10, 0), ex.batch_indices(cfg, 10, 3))


def test_divergence_names_step_and_component():
    cfg = tiny(n_tasks=8, inner_lr=1e60)
    with pytest.raises(ex.TrainingDiverged) as e:
        ex.train(cfg)
    assert e.value.step == 1 and "inner" in str(e.value)


def test_training_needs_one_full_batch():
    with pytest.raises(ConfigError, match="batch"):
        ex.train(tiny(n_tasks=3))


def test_training_refuses_an_incompatible_dataset():
    cfg = tiny(n_tasks=8)
    tasks, manifest = ex.generate(cfg.replace(variant="five"))
    with pytest.raises(ConfigError):
        ex.train(cfg, tasks, manifest)


# ---------------------------------------------------------------- evaluation

def test_untrained_evaluation_smoke():
    cfg = tiny()
    records, s = ex.evaluate(cfg, ex.initial_state(cfg).params)
    assert len(records) == s.n == 30
    assert np.isfinite(s.mean_post) and s.ci_post > 0
    assert s.mean_post == pytest.approx(np.mean([r.mse_post for r in records]), abs=1e-12)
    assert s.mean_pre == pytest.approx(np.mean([r.mse_pre for r in records]), abs=1e-12)


@pytest.mark.parametrize("algorithm", ["ours", "maml"])
def test_k0_evaluation_pre_equals_post(algorithm):
    cfg = tiny(algorithm, inner_steps=0)
    records, _ = ex.evaluate(cfg, ex.initial_state(cfg).params)
    assert all(r.mse_pre == r.mse_post for r in records)


def test_evaluation_is_deterministic_and_chunk_independent(monkeypatch):
    cfg = tiny(eval_tasks=25)
    params = ex.initial_state(cfg).params
    a, _ = ex.evaluate(cfg, params)
    monkeypatch.setattr(ex, "EVAL_CHUNK", 7)
    b, _ = ex.evaluate(cfg, params)
    assert a == b


def test_record_matches_manual_adaptation_on_clean_targets():
    from covmeta import meta
    from covmeta.rng import EVAL_EPS, CounterRng
    cfg = tiny(eval_tasks=3)
    params = ex.initial_state(cfg).params
    records, _ = ex.evaluate(cfg, params)
    arch, mcfg = cfg.architecture(), cfg.meta_config()
    md = ex.meta_distribution(cfg, cfg.eval_support, cfg.eval_query)
    t = T.task_at(md, cfg.eval_seed, 2)
    eps = CounterRng(cfg.eval_seed, EVAL_EPS, 2).normal(arch.latent)[None]
    lam = meta.meta_test_adapt(params, t.support_x[None], t.support_y[None], eps, arch, mcfg)
    clean = T.eval_hypothesis(t.hypothesis, t.query_x)
    assert records[2].mse_post == pytest.approx(float(meta.mse(lam, t.query_x[None], clean[None], arch)[0]),
                                                rel=1e-12)
    assert records[2].family == t.hypothesis.family and records[2].mode == t.mode


def test_confidence_halfwidth():
    v = [1.0, 2.0, 3.0, 4.0]
    assert ex.confidence_halfwidth(v) == pytest.approx(1.96 * np.std(v, ddof=1) / 2)


def test_eval_config_refuses_architecture_change():
    with pytest.raises(ConfigError, match="architecture"):
        ex.eval_config(tiny(), {"hidden": (8, 9)})


def test_records_round_trip(tmp_path):
    cfg = tiny(eval_tasks=5)
    records, s = ex.evaluate(cfg, ex.initial_state(cfg).params, label="x")
    ex.write_records(tmp_path / "r.csv", records, s)
    back, s2 = ex.read_records(tmp_path / "r.csv")
    assert back == records and s2 == s


# ---------------------------------------------------------------- compare

def write_eval(tmp_path, name, algorithm="ours", variant="sine-quad-linear", **kw):
    cfg = tiny(algorithm, variant=variant, eval_tasks=5, **kw)
    records, s = ex.evaluate(cfg, ex.initial_state(cfg).params)
    ex.write_records(tmp_path / name, records, s)
    return tmp_path / name, s


def test_compare_with_itself(tmp_path):
    p, s = write_eval(tmp_path, "a.csv")
    table = ex.compare([p, p])
    assert [r[0] for r in table.rows] == ["ours", "ours#2"]
    assert table.rows[0][1] == table.rows[1][1] == {"sine-quad-linear": (s.mean_post, s.ci_post)}


def test_compare_layout_and_csv_round_trip(tmp_path):
    a, _ = write_eval(tmp_path, "a.csv", "maml")
    b, _ = write_eval(tmp_path, "b.csv", "ours")
    c, _ = write_eval(tmp_path, "c.csv", "ours", "sine")
    table = ex.compare([a, b, c])
    assert table.columns == ["sine-quad-linear", "sine"]
    assert [r[0] for r in table.rows] == ["maml", "ours"]
    assert ex.Comparison.from_csv(table.to_csv()) == table
    assert "maml" in table.to_text()


def test_compare_refuses_mixed_seeds(tmp_path):
    a, _ = write_eval(tmp_path, "a.csv")
    b, _ = write_eval(tmp_path, "b.csv", eval_seed=7)
    with pytest.raises(ConfigError, match="seeds"):
        ex.compare([a, b])


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_report():
    results = ex.gradcheck_battery(inner_steps=2, first_order=True)
    text = ex.format_gradcheck(results)
    assert "expected-divergent" in text and "FAIL" not in text
    assert all(r.passed for r in results)
    k0 = [r for r in results if r.name.endswith("first-order K=0")]
    assert k0 and all(r.worst <= ex.GRADCHECK_TOL for r in k0)


# ---------------------------------------------------------------- command line

def cli_flags(tmp_path, **kw):
    cfg = dict(TINY, output_dir=str(tmp_path), **kw)
    args = []
    for k, v in cfg.items():
        flag = "--" + k.replace("_", "-")
        args += [flag, *map(str, v)] if isinstance(v, tuple) else [flag, str(v)]
    return args


def test_cli_gen_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a.bin", "b.bin"):
        assert main(["gen", "--variant", "sine", "--n-tasks", "30", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert "sine" in capsys.readouterr().out


def test_cli_gen_five_dependent_lists_five_modes(tmp_path):
    assert main(["gen", "--variant", "five", "--n-tasks", "10", "--out", str(tmp_path / "d.bin")]) == 0
    _, manifest = T.read_dataset(tmp_path / "d.bin")
    assert len(manifest["modes"]) == 5
    assert sorted(manifest["mode_families"]) == sorted(T.FAMILIES)


@pytest.mark.parametrize("argv", [["gen", "--n-tasks", "0"], ["gen", "--bogus"], ["frobnicate"],
                                  ["eval"], ["compare", "only-one.csv"]])
def test_cli_validation_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_cli_unwritable_path_exits_1(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    assert main(["gen", "--n-tasks", "3", "--out", str(tmp_path / "f" / "d.bin")]) == 1
    assert "f" in capsys.readouterr().err


def test_cli_train_eval_compare(tmp_path, capsys):
    flags = cli_flags(tmp_path, n_tasks=8)
    assert main(["train", "--quiet", *flags]) == 0
    ck = tmp_path / "checkpoint.bin"
    assert ck.exists() and (tmp_path / "train.jsonl").exists()
    assert RunConfig.load(tmp_path / "config.json") == ckpt.load(ck).config
    assert main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "e.csv"), "--eval-tasks", "10"]) == 0
    assert main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "f.csv"), "--hidden", "4"]) == 1
    assert main(["compare", str(tmp_path / "e.csv"), str(tmp_path / "e.csv"),
                 "--csv", str(tmp_path / "t.csv")]) == 0
    assert ex.Comparison.from_csv((tmp_path / "t.csv").read_text()).rows[0][0] == "ours"


def test_cli_eval_config_architecture_mismatch(tmp_path):
    cfg = tiny(n_tasks=4)
    ex.train(cfg, checkpoint_dir=tmp_path)
    cfg.replace(latent=5).save(tmp_path / "other.json")
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.bin"),
                 "--config", str(tmp_path / "other.json"), "--out", str(tmp_path / "e.csv")]) == 1


def test_cli_train_divergence_exits_2(tmp_path, capsys):
    assert main(["train", "--quiet", *cli_flags(tmp_path, n_tasks=8, inner_lr=1e60)]) == 2
    assert "step 1" in capsys.readouterr().err


def test_cli_config_file_and_flag_override(tmp_path):
    tiny("maml", n_tasks=4, output_dir=str(tmp_path)).save(tmp_path / "c.json")
    assert main(["train", "--quiet", "--config", str(tmp_path / "c.json"), "--inner-steps", "1"]) == 0
    saved = RunConfig.load(tmp_path / "config.json")
    assert saved.algorithm == "maml" and saved.inner_steps == 1


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--inner-steps", "1", "--algorithm", "maml", "--first-order"]) == 0
    out = capsys.readouterr().out
    assert "expected-divergent" in out and "gradcheck passed" in out


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "covmeta", "gen", "--n-tasks", "0"], capture_output=True)
    assert r.returncode == 1
