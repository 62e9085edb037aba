import csv

import numpy as np
import pytest

from anchorudf.cli import main
from anchorudf.extraction import load_ply
from anchorudf.geometry import load_obj
from anchorudf.sampling import load_training_set
from anchorudf.training import Checkpoint

TINY = ["--anchors", "12", "--grid-res", "6", "--c-pos", "4", "--code-dim", "8", "--decoder-hidden", "16",
        "--anchor-hidden", "8", "--lr", "1e-4", "--batch-size", "64", "--epochs", "3", "--gda-start-epoch", "2"]


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.fixture(scope="module")
def hemi_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "hemi.obj"
    assert run("synth", "--kind", "hemisphere", "--res", 12, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def small_set(tmp_path_factory, hemi_obj):
    path = tmp_path_factory.mktemp("data") / "hemi.bin"
    assert run("sample", "--mesh", hemi_obj, "--n", 300, "--out", path) == 0
    return path


def test_synth_reports_boundary_edges(tmp_path, capsys):
    assert run("synth", "--kind", "sphere", "--res", 8, "--out", tmp_path / "s.obj") == 0
    assert "0 boundary edges" in capsys.readouterr().out
    assert load_obj(tmp_path / "s.obj").boundary_edges() == []
    assert run("synth", "--kind", "hemisphere", "--res", 8, "--out", tmp_path / "h.obj") == 0
    assert "0 boundary edges" not in capsys.readouterr().out


def test_sample_defaults_record_delta_and_count(tmp_path, hemi_obj):
    out = tmp_path / "d.bin"
    assert run("sample", "--mesh", hemi_obj, "--out", out) == 0
    ts = load_training_set(out)
    assert len(ts) == 5000 and ts.delta == 0.2 and ts.seed == 42


def test_sample_n_records(tmp_path, hemi_obj):
    assert run("sample", "--mesh", hemi_obj, "--n", 100, "--out", tmp_path / "d.bin") == 0
    assert len(load_training_set(tmp_path / "d.bin")) == 100


def test_sample_is_deterministic_per_seed(tmp_path, hemi_obj):
    for name, seed in (("a", 5), ("b", 5), ("c", 6)):
        assert run("sample", "--mesh", hemi_obj, "--n", 50, "--seed", seed, "--out", tmp_path / f"{name}.bin") == 0
    blob = {n: (tmp_path / f"{n}.bin").read_bytes() for n in "abc"}
    assert blob["a"] == blob["b"] != blob["c"]


def test_usage_errors_exit_1(tmp_path, hemi_obj):
    assert run("synth", "--kind", "torus", "--out", tmp_path / "x.obj") == 1
    assert run("frobnicate") == 1
    assert run("fit", "--out", tmp_path / "f") == 1  # neither --data nor --mesh
    assert run("ablate-anchors", "--mesh", hemi_obj, "--k-list", "10,x", "--out", tmp_path / "a.csv") == 1


def test_data_errors_exit_2(tmp_path):
    assert run("sample", "--mesh", tmp_path / "missing.obj", "--out", tmp_path / "d.bin") == 2
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    assert run("sample", "--mesh", tmp_path / "bad.obj", "--out", tmp_path / "d.bin") == 2
    (tmp_path / "junk.bin").write_bytes(b"junk")
    assert run("fit", "--data", tmp_path / "junk.bin", "--out", tmp_path / "f") == 2
    assert run("extract", "--ckpt", tmp_path / "junk.bin", "--out", tmp_path / "c.ply") == 2
    assert run("sample", "--config", tmp_path / "nope.ini", "--mesh", "x", "--out", "y") == 2


def test_non_finite_loss_exits_3(tmp_path, small_set, capsys):
    code = run("fit", "--data", small_set, "--out", tmp_path / "f", *TINY, "--lr", "1e300")
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


def test_field_that_never_reaches_surface_exits_3(tmp_path, small_set, capsys):
    assert run("fit", "--data", small_set, "--out", tmp_path / "f", *TINY) == 0
    ck = Checkpoint.load(tmp_path / "f" / "final.ckpt")
    ck.params["dec.5.weight"][:] = 0.0
    ck.params["dec.5.bias"][:] = 1.0  # the field is 1 everywhere
    ck.save(tmp_path / "const.ckpt")
    assert run("extract", "--ckpt", tmp_path / "const.ckpt", "--out", tmp_path / "c.ply",
               "--n-init", 200, "--target", 100) == 3
    assert "min predicted udf 1" in capsys.readouterr().err
    assert not (tmp_path / "c.ply").exists()


def test_fit_extract_eval_pipeline(tmp_path, small_set, hemi_obj, capsys):
    fit_dir = tmp_path / "f"
    assert run("fit", "--data", small_set, "--out", fit_dir, *TINY) == 0
    ck = Checkpoint.load(fit_dir / "final.ckpt")
    assert ck.epoch == 3 and ck.model_config.k_anchors == 12
    ply = tmp_path / "c.ply"
    assert run("extract", "--ckpt", fit_dir / "final.ckpt", "--out", ply, "--valid", 1.0, "--n-init", 300,
               "--target", 400) == 0
    assert load_ply(ply).shape == (400, 3)
    capsys.readouterr()
    assert run("eval", "--pred", ply, "--gt", hemi_obj, "--gt-samples", 2000, "--csv", tmp_path / "m.csv") == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["metric", "value", "(x1e3)"]
    assert [line.split()[0] for line in table[1:]] == ["chamfer", "p2s"]
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(rows[0]["p2s_x1e3"]) == pytest.approx(float(table[2].split()[1]), rel=1e-5)


def test_lambda2_zero_never_evaluates_gda(tmp_path, small_set):
    assert run("fit", "--data", small_set, "--out", tmp_path / "f", *TINY, "--lambda2", 0) == 0
    ck = Checkpoint.load(tmp_path / "f" / "final.ckpt")
    assert ck.train_config.lambda2 == 0.0
    assert all(h["L_GDA"] == 0.0 for h in ck.history)


def test_resume_continues_deterministically(tmp_path, small_set):
    assert run("fit", "--data", small_set, "--out", tmp_path / "full", *TINY) == 0
    assert run("fit", "--data", small_set, "--out", tmp_path / "part", *TINY, "--epochs", 1) == 0
    assert run("fit", "--data", small_set, "--out", tmp_path / "rest", *TINY,
               "--resume", tmp_path / "part" / "final.ckpt") == 0
    a = Checkpoint.load(tmp_path / "full" / "final.ckpt")
    b = Checkpoint.load(tmp_path / "rest" / "final.ckpt")
    assert b.epoch == 3
    assert {k: v.tobytes() for k, v in a.params.items()} == {k: v.tobytes() for k, v in b.params.items()}


def test_fit_from_mesh_with_default_model(tmp_path, hemi_obj):
    """Default model and training flags, shortened to two epochs to keep the suite fast."""
    assert run("fit", "--mesh", hemi_obj, "--out", tmp_path / "f", "--epochs", 2, "--samples", 1024) == 0
    ck = Checkpoint.load(tmp_path / "f" / "final.ckpt")
    assert ck.model_config.k_anchors == 600 and np.isfinite(ck.history[-1]["L_UDF"])


def test_config_file_precedence(tmp_path, hemi_obj):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[anchorudf]\nseed = 7\nn = 40\ngrid-res = 4\n\n[sample]\nn = 60\n")
    assert run("sample", "--config", cfg, "--mesh", hemi_obj, "--out", tmp_path / "a.bin") == 0
    ts = load_training_set(tmp_path / "a.bin")
    assert len(ts) == 60 and ts.seed == 7  # section beats global, unknown key ignored
    assert run("sample", "--config", cfg, "--mesh", hemi_obj, "--n", 70, "--out", tmp_path / "b.bin") == 0
    assert len(load_training_set(tmp_path / "b.bin")) == 70  # flag beats file


def test_one_config_file_drives_the_pipeline(tmp_path, hemi_obj):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[anchorudf]\nseed = 3\n\n"
        "[fit]\nanchors = 12\ngrid_res = 6\nc_pos = 4\ncode_dim = 8\ndecoder_hidden = 16\nanchor_hidden = 8\n"
        "lr = 1e-4\nbatch_size = 64\nepochs = 2\nsamples = 300\nkeep-epoch-checkpoints = yes\n\n"
        "[extract]\nvalid = 1.0\nn_init = 200\ntarget = 200\n\n"
        "[eval]\ngt_samples = 500\n")
    assert run("fit", "--config", cfg, "--mesh", hemi_obj, "--out", tmp_path / "f") == 0
    assert {p.name for p in (tmp_path / "f").glob("epoch_*.ckpt")} == {"epoch_0001.ckpt", "epoch_0002.ckpt"}
    assert Checkpoint.load(tmp_path / "f" / "final.ckpt").seed == 3
    assert run("extract", "--config", cfg, "--ckpt", tmp_path / "f" / "final.ckpt", "--out", tmp_path / "c.ply") == 0
    assert len(load_ply(tmp_path / "c.ply")) == 200
    assert run("eval", "--config", cfg, "--pred", tmp_path / "c.ply", "--gt", hemi_obj) == 0


def test_bad_config_boolean_is_usage_error(tmp_path, hemi_obj):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[sample]\nno-normalize = perhaps\n")
    assert run("sample", "--config", cfg, "--mesh", hemi_obj, "--out", tmp_path / "a.bin") == 1
