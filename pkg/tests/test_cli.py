import csv

import numpy as np
import pytest

from cmmd import autograd, cli
from cmmd.data import load_dataset, read_matrix
from cmmd.diagnostics import CollapseConfig, collapse_report, rmse
from cmmd.model import tie_encoder_to_prior
from cmmd.trainer import load_checkpoint, save_checkpoint

CONFIG = """\
[synth]
modalities = x1:10, x2:6
rows = 240
test_rows = 80
classes = 4
latent_dim = 4

[model]
latent_dim = 4
encoder_hidden = 12
prior_hidden = 12
decoder_hidden = 12
classifier_hidden = 6

[trainer]
epochs = 3
batch_size = 64
lr = 1e-3
"""


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data/train"),
                     "--out", str(root / "run")]) == 0
    return root, cfg


def test_synth_missing_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[synth]\nmodalities = a:2, b:2\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "synth.rows" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[trainer]\nepoch = 3\n")
    assert cli.main(["gradcheck", "--config", str(cfg)]) == 2
    assert "trainer.epoch" in capsys.readouterr().err
    assert cli.main(["gradcheck", "--set", "nosuch.key=1"]) == 2


def test_missing_input_exit_1(tmp_path, workspace):
    root, cfg = workspace
    code = cli.main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--data", str(root / "data/test"), "--out", str(tmp_path / "e")])
    assert code == 1


def test_synth_is_byte_deterministic(tmp_path, workspace):
    root, cfg = workspace
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for split in ("train", "test"):
        for f in sorted((root / "data" / split).iterdir()):
            assert f.read_bytes() == (tmp_path / "again" / split / f.name).read_bytes()


def test_resolved_config_echoed(workspace):
    root, _ = workspace
    text = (root / "run" / "resolved_config.cfg").read_text()
    assert "[objective]" in text and "alpha = 10" in text and "lambda = 1000" in text
    assert "epochs = 3" in text


def test_cmmd_seed_env_override(tmp_path, workspace, monkeypatch):
    root, cfg = workspace
    monkeypatch.setenv("CMMD_SEED", "17")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert "seed = 17" in (tmp_path / "s" / "resolved_config.cfg").read_text()
    other = load_dataset(tmp_path / "s" / "train")
    base = load_dataset(root / "data" / "train")
    assert not np.array_equal(other.x["x1"], base.x["x1"])


def test_train_outputs(workspace):
    root, _ = workspace
    rows = read_csv(root / "run" / "metrics.csv")
    assert rows[0][:6] == ["epoch", "recon_log_prob", "class_log_prob", "kl_term", "mmd_term", "total_objective"]
    assert len(rows) == 4
    hist = read_csv(root / "run" / "history.csv")
    assert hist[0] == ["epoch", "wall_clock"] and len(hist) == 4


def test_omega_one_zero_weights_mmd(tmp_path, workspace):
    root, cfg = workspace
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data/train"), "--out",
                     str(tmp_path / "r"), "--set", "objective.omega=1", "--set", "trainer.epochs=1"]) == 0
    rows = read_csv(tmp_path / "r" / "metrics.csv")
    head = rows[0]
    for row in rows[1:]:
        assert float(row[head.index("mmd_weight")]) == 0.0
        assert float(row[head.index("mmd_contribution")]) == 0.0


def test_identical_seeds_identical_metrics(tmp_path, workspace):
    root, cfg = workspace
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data/train"),
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/metrics.csv").read_bytes() == (root / "run/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint.ckpt").read_bytes() == (root / "run/checkpoint.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, workspace):
    root, cfg = workspace
    data = str(root / "data/train")
    out = tmp_path / "resumed"
    assert cli.main(["train", "--config", str(cfg), "--data", data, "--out", str(out),
                     "--set", "trainer.epochs=1"]) == 0
    (tmp_path / "partial.ckpt").write_bytes((out / "checkpoint.ckpt").read_bytes())
    assert cli.main(["train", "--config", str(cfg), "--data", data, "--out", str(out),
                     "--resume", str(tmp_path / "partial.ckpt")]) == 0
    assert (out / "checkpoint.ckpt").read_bytes() == (root / "run/checkpoint.ckpt").read_bytes()
    assert (out / "metrics.csv").read_bytes() == (root / "run/metrics.csv").read_bytes()


def test_omega_sweep_has_eleven_rows(tmp_path, workspace):
    root, cfg = workspace
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data/train"), "--out",
                     str(tmp_path / "sweep"), "--omega-sweep", "--set", "trainer.epochs=1",
                     "--set", "synth.rows=100"]) == 0
    rows = read_csv(tmp_path / "sweep" / "sweep.csv")
    assert len(rows) == 12
    assert [float(r[0]) for r in rows[1:]] == [round(0.1 * i, 1) for i in range(11)]


def test_eval_csv_and_generate_consistency(tmp_path, workspace):
    root, cfg = workspace
    ck, test = str(root / "run/checkpoint.ckpt"), str(root / "data/test")
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", ck, "--data", test, "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert rows[0] == ["metric", "target", "value"]
    assert [r[:2] for r in rows[1:]] == [["error_rate", "label"], ["rmse", "x2"]]
    for name in ("g1", "g2"):
        assert cli.main(["generate", "--config", str(cfg), "--checkpoint", ck, "--data", test,
                         "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "g1" / "x2.mat").read_bytes()
    assert a == (tmp_path / "g2" / "x2.mat").read_bytes()
    gen = read_matrix(tmp_path / "g1" / "x2.mat")
    truth = load_dataset(test).x["x2"]
    assert gen.shape == truth.shape == (80, 6)
    # the container stores 32-bit floats, so agreement is to single precision
    assert rmse(gen, truth) == pytest.approx(float(rows[2][2]), rel=1e-6)


def test_collapse_csv_matches_library(tmp_path, workspace):
    root, cfg = workspace
    ck, test = str(root / "run/checkpoint.ckpt"), str(root / "data/test")
    assert cli.main(["collapse", "--config", str(cfg), "--checkpoint", ck, "--data", test,
                     "--out", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "collapse.csv")
    assert rows[0] == ["pairing", "epsilon", "fraction"]
    model, _, _ = load_checkpoint(ck)
    direct = collapse_report(model, load_dataset(test).batch(), CollapseConfig(), np.random.default_rng(0))
    assert [(r[0], float(r[1]), float(r[2])) for r in rows[1:]] == direct
    per = {}
    for r in rows[1:]:
        per[r[0]] = per.get(r[0], 0) + 1
    assert set(per.values()) == {61}


def test_collapse_degenerate_checkpoint(tmp_path, workspace):
    root, cfg = workspace
    model, _, _ = load_checkpoint(root / "run/checkpoint.ckpt")
    model.dropout = 0.0
    tie_encoder_to_prior(model)
    save_checkpoint(model, None, tmp_path / "tied.ckpt")
    assert cli.main(["collapse", "--config", str(cfg), "--checkpoint", str(tmp_path / "tied.ckpt"),
                     "--data", str(root / "data/test"), "--out", str(tmp_path / "c")]) == 0
    for pairing, eps, frac in read_csv(tmp_path / "c" / "collapse.csv")[1:]:
        if pairing == "q_vs_prior" and float(eps) > 0:
            assert float(frac) == 1.0


def test_fresh_model_eval_near_chance(tmp_path, workspace):
    root, cfg = workspace
    test = load_dataset(root / "data/test")
    errors = []
    for seed in range(20):
        model = cli.build_model(cli.RunConfig.from_file(cfg), test).init_params(np.random.default_rng(seed))
        save_checkpoint(model, None, tmp_path / "fresh.ckpt")
        assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "fresh.ckpt"),
                         "--data", str(root / "data/test"), "--out", str(tmp_path / "e")]) == 0
        errors.append(float(read_csv(tmp_path / "e" / "metrics.csv")[1][2]))
    assert 0.65 <= np.mean(errors) <= 0.85


def test_gradcheck_passes_and_reports_groups(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for group in ("encoder", "prior", "classifier", "decoder.x2", "decoder.x3"):
        assert group in out


def test_gradcheck_fails_with_corrupted_backward_rule(monkeypatch, capsys):
    original = autograd._backward_rule

    def corrupted(node, g):
        grads = original(node, g)
        if node.kind == "softplus":
            grads = [gi * 1.01 if gi is not None else None for gi in grads]
        return grads

    monkeypatch.setattr(autograd, "_backward_rule", corrupted)
    assert cli.main(["gradcheck"]) == 1
    assert "fail" in capsys.readouterr().out
