"""Config format, exit codes, run directories, and recipe definitions."""

import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from e2ediff import autoencoder as ae
from e2ediff import diffusion as df
from e2ediff import harness as hn
from e2ediff import numkit as nk
from e2ediff import trainer as tr
from e2ediff.channels import QAM16


@st.composite
def run_configs(draw):
    batch = draw(st.integers(1, 64))
    fl = lambda lo, hi: st.floats(lo, hi, allow_nan=False, allow_infinity=False)
    return tr.RunConfig(
        channel=draw(st.sampled_from(tr.CHANNEL_KINDS)),
        sigma_r=draw(fl(0.1, 5.0)),
        train_ebn0_db=draw(fl(-5.0, 30.0)),
        n_messages=draw(st.sampled_from([4, 16])),
        block_dim=draw(st.integers(1, 8)),
        codec_hidden=draw(st.integers(1, 32)),
        ae_lr=draw(fl(1e-6, 0.1)),
        surrogate=draw(st.sampled_from(tr.SURROGATE_KINDS)),
        diffusion_t=draw(st.integers(1, 200)),
        diffusion_beta=draw(fl(1e-5, 0.999)),
        reverse_noise=draw(st.sampled_from(df.REVERSE_NOISE_KINDS)),
        denoiser_hidden=draw(st.integers(1, 128)),
        denoiser_depth=draw(st.integers(1, 4)),
        denoiser_lr_initial=draw(fl(1e-6, 0.1)),
        denoiser_lr_final=draw(fl(1e-7, 0.1)),
        wgan_hidden=draw(st.integers(1, 256)),
        wgan_clip=draw(fl(1e-4, 1.0)),
        wgan_n_critic=draw(st.integers(1, 10)),
        wgan_lr=draw(fl(1e-7, 0.1)),
        dataset_size=draw(st.integers(batch, batch * 50)),
        batch_size=batch,
        early_phases=draw(st.integers(0, 4)),
        late_phases=draw(st.integers(1, 4)),
        early_gen_epochs=draw(st.integers(0, 60)),
        early_ae_epochs=draw(st.integers(0, 60)),
        late_gen_epochs=draw(st.integers(0, 60)),
        late_ae_epochs=draw(st.integers(0, 60)),
        drift_threshold=draw(fl(0.0, 1.0)),
        seed=draw(st.integers(0, 2**31)),
    )


# ---------------------------------------------------------------------------
# config format

def test_empty_config_is_all_defaults():
    assert hn.parse_config("") == tr.RunConfig()


def test_comments_and_blanks_skipped():
    cfg = hn.parse_config("# a comment\n\n  diffusion.T=50  \n")
    assert cfg.diffusion_t == 50


def test_unknown_key_rejected_with_line_number():
    with pytest.raises(hn.ConfigError, match=r"line 2: unknown key 'zap'"):
        hn.parse_config("diffusion.T=50\nzap=1\n")


def test_missing_equals_rejected():
    with pytest.raises(hn.ConfigError, match=r"line 1: expected key=value"):
        hn.parse_config("diffusion.T 50\n")


def test_duplicate_key_rejected():
    with pytest.raises(hn.ConfigError, match="duplicate key"):
        hn.parse_config("diffusion.T=50\ndiffusion.T=60\n")


def test_unparseable_value_rejected():
    with pytest.raises(hn.ConfigError, match=r"line 1: cannot parse 'many'"):
        hn.parse_config("diffusion.T=many\n")


def test_bad_beta_message():
    with pytest.raises(hn.ConfigError, match=r"beta must lie in \(0,1\)"):
        hn.parse_config("beta_t=1.5\n")


def test_constraint_violation_surfaces_as_config_error():
    with pytest.raises(hn.ConfigError, match="dataset_size"):
        hn.parse_config("data.dataset_size=5\ndata.batch_size=10\n")


@given(run_configs())
def test_config_round_trip(cfg):
    assert hn.parse_config(hn.serialize_config(cfg)) == cfg


def test_serialized_config_covers_every_field():
    text = hn.serialize_config(tr.RunConfig())
    keys = {line.split("=")[0] for line in text.splitlines()}
    assert keys == {k for k, _ in hn._CONFIG_KEYS}


def test_load_config_env_seed_override(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("run.seed=7\n")
    monkeypatch.setenv("E2EDIFF_SEED", "99")
    assert hn.load_config(path).seed == 99
    monkeypatch.delenv("E2EDIFF_SEED")
    assert hn.load_config(path).seed == 7


def test_bad_env_seed_rejected(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("")
    monkeypatch.setenv("E2EDIFF_SEED", "soon")
    with pytest.raises(hn.ConfigError, match="E2EDIFF_SEED"):
        hn.load_config(path)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(hn.ConfigError, match="cannot read config"):
        hn.load_config(tmp_path / "absent.cfg")


# ---------------------------------------------------------------------------
# recipes

def test_recipe_names_complete():
    for name in hn.RECIPE_NAMES:
        assert hn.get_recipe(name).name == name
    with pytest.raises(hn.ConfigError, match="unknown recipe"):
        hn.get_recipe("fig9")


def test_fig2_recipe_matches_stated_parameters():
    rec = hn.get_recipe("fig2_awgn_qam16")
    cfg = rec.config
    assert cfg.channel == "awgn"
    assert cfg.train_ebn0_db == 5.0
    assert cfg.n_messages == 16 and cfg.block_dim == 2
    assert cfg.diffusion_t == 100
    assert cfg.diffusion_beta == 0.05
    assert cfg.denoiser_hidden == 64 and cfg.denoiser_depth == 3
    assert cfg.denoiser_lr_initial == 1e-3
    assert cfg.denoiser_lr_final == 1e-4
    assert cfg.dataset_size == 100_000 and cfg.batch_size == 3000
    assert rec.fidelity_samples == 10_000
    # rate-2 operating point
    assert cfg.train_sigma == pytest.approx(0.28117066259517454, rel=1e-12)


def test_fig3_recipe_matches_stated_parameters():
    rec = hn.get_recipe("fig3_awgn_e2e")
    cfg = rec.config
    assert cfg.channel == "awgn"
    assert cfg.train_ebn0_db == 5.0
    assert cfg.n_messages == 16 and cfg.block_dim == 7
    assert cfg.codec_hidden == 16 and cfg.ae_lr == 1e-3
    assert cfg.diffusion_t == 50 and cfg.diffusion_beta == 0.05
    assert cfg.denoiser_lr_initial == 1e-3 and cfg.denoiser_lr_final == 1e-5
    assert cfg.dataset_size == 100_000 and cfg.batch_size == 3000
    assert cfg.wgan_hidden == 128 and cfg.wgan_lr == 1e-4
    assert rec.ebn0_grid == tuple(float(d) for d in range(2, 9))
    assert rec.config_model_aware.surrogate == "model_aware"
    assert rec.config_wgan.surrogate == "wgan"


def test_fig4_recipe_matches_stated_parameters():
    rec = hn.get_recipe("fig4_rayleigh_e2e")
    cfg = rec.config
    assert cfg.channel == "rayleigh"
    assert cfg.sigma_r == 1.0
    assert cfg.train_ebn0_db == 12.0
    assert cfg.wgan_hidden == 256 and cfg.wgan_lr == 5e-5
    assert rec.ebn0_grid == tuple(float(d) for d in range(1, 26))


def test_recipes_bind_sqrt_beta_sampling():
    for name in hn.RECIPE_NAMES:
        assert hn.get_recipe(name).config.reverse_noise == "sqrt_beta"


def test_quick_recipes_shrink_budgets():
    for name in hn.RECIPE_NAMES:
        full, quick = hn.get_recipe(name), hn.get_recipe(name, quick=True)
        assert quick.config.dataset_size < full.config.dataset_size
        if name != "fig2_awgn_qam16":
            assert len(quick.ebn0_grid) < len(full.ebn0_grid)


# ---------------------------------------------------------------------------
# exit codes

def test_cli_usage_errors():
    assert hn.run_cli([]) == hn.EXIT_USAGE
    assert hn.run_cli(["train", "--no-such-flag"]) == hn.EXIT_USAGE
    assert hn.run_cli(["recipe", "fig9", "--out", "x"]) == hn.EXIT_USAGE


def test_cli_help_exits_zero():
    assert hn.run_cli(["--help"]) == 0


def test_cli_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("beta_t=1.5\n")
    code = hn.run_cli(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == hn.EXIT_CONFIG
    assert "beta must lie in (0,1)" in capsys.readouterr().err


def test_cli_missing_checkpoint(tmp_path):
    code = hn.run_cli(["eval-ser", "--codec", str(tmp_path / "absent.ckpt"),
                       "--out", str(tmp_path / "run"), "--ebn0", "5"])
    assert code == hn.EXIT_MISSING


def test_cli_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("not a checkpoint\n")
    code = hn.run_cli(["eval-ser", "--codec", str(bad),
                       "--out", str(tmp_path / "run"), "--ebn0", "5"])
    assert code == hn.EXIT_MISSING


def test_cli_training_failure_code(tmp_path, monkeypatch):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("")

    def boom(*args, **kwargs):
        raise tr.TrainAbort("AE phase 0 epoch 0: loss is not finite")
    monkeypatch.setattr(tr, "alternate_train", boom)
    code = hn.run_cli(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == hn.EXIT_RUNTIME


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "e2ediff", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "recipe" in out.stdout


# ---------------------------------------------------------------------------
# run directories end to end (tiny budgets)

def tiny_config_text():
    return (
        "codec.n_messages=4\ncodec.block_dim=2\ncodec.hidden=8\n"
        "surrogate.kind=ddpm\ndiffusion.T=4\ndiffusion.hidden=8\ndiffusion.depth=2\n"
        "data.dataset_size=40\ndata.batch_size=20\n"
        "schedule.early_phases=1\nschedule.late_phases=1\n"
        "schedule.early_gen_epochs=1\nschedule.early_ae_epochs=1\n"
        "schedule.late_gen_epochs=1\nschedule.late_ae_epochs=1\n"
        "run.seed=5\n"
    )


def nearest_point_codec():
    points = math.sqrt(2.0) * np.array([[1.0, 0.0], [0.0, 1.0],
                                        [-1.0, 0.0], [0.0, -1.0]])
    enc = nk.Mlp([nk.DenseLayer(points.copy(), np.zeros(2), "linear")])
    dec = nk.Mlp([nk.DenseLayer(points.T.copy() * 8.0, np.zeros(4), "softmax")])
    return ae.CodecPair(enc, dec, 4, 2)


def test_train_run_directory(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(tiny_config_text())
    out = tmp_path / "run"
    assert hn.run_cli(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    for name in ("config.txt", "seed.txt", "codec.ckpt", "surrogate.ckpt",
                 "report.csv", "summary.txt", "manifest.txt"):
        assert (out / name).is_file(), name
    assert (out / "phase_checkpoints" / "codec_phase0.ckpt").is_file()
    assert (out / "phase_checkpoints" / "surrogate_phase1.ckpt").is_file()
    # snapshot reproduces the effective config
    assert hn.load_config(out / "config.txt") == hn.parse_config(tiny_config_text())
    assert (out / "seed.txt").read_text() == "master_seed=5\n"
    # checkpoints load back
    codec = ae.load_codec(out / "codec.ckpt")
    assert codec.n_messages == 4 and codec.block_dim == 2
    den, sched = df.load_denoiser(out / "surrogate.ckpt")
    assert den.n_steps == 4 and sched.T == 4


def test_manifest_hashes_verify(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(tiny_config_text())
    out = tmp_path / "run"
    assert hn.run_cli(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    lines = (out / "manifest.txt").read_text().splitlines()
    assert lines, "manifest must not be empty"
    names = []
    for line in lines:
        digest, rel = line.split("  ", 1)
        names.append(rel)
        actual = hashlib.sha256((out / rel).read_bytes()).hexdigest()
        assert actual == digest, rel
    assert "manifest.txt" not in names
    assert "phase_checkpoints/codec_phase0.ckpt" in names
    assert names == sorted(names)


def test_cli_seed_flag_and_env_priority(tmp_path, monkeypatch):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(tiny_config_text())
    out1 = tmp_path / "r1"
    assert hn.run_cli(["train", "--config", str(cfg_file), "--out", str(out1),
                       "--seed", "123"]) == 0
    assert (out1 / "seed.txt").read_text() == "master_seed=123\n"
    monkeypatch.setenv("E2EDIFF_SEED", "321")
    out2 = tmp_path / "r2"
    assert hn.run_cli(["train", "--config", str(cfg_file), "--out", str(out2),
                       "--seed", "123"]) == 0
    assert (out2 / "seed.txt").read_text() == "master_seed=321\n"


def test_eval_ser_sigma_override_zero(tmp_path):
    ckpt = tmp_path / "codec.ckpt"
    ae.save_codec(ckpt, nearest_point_codec())
    out = tmp_path / "run"
    code = hn.run_cli(["eval-ser", "--codec", str(ckpt), "--out", str(out),
                       "--ebn0", "2,5,8", "--sigma-override", "0",
                       "--min-errors", "0"])
    assert code == 0
    import e2ediff.evalstats as ev
    table = ev.read_ser_csv(out / "ser.csv")
    assert [r.ebn0_db for r in table.rows] == [2.0, 5.0, 8.0]
    assert all(r.num_errors == 0 for r in table.rows)
    assert (out / "plot_ser.py").is_file()
    assert (out / "codec.ckpt").is_file()


def test_eval_ser_rejects_small_min_symbols(tmp_path):
    ckpt = tmp_path / "codec.ckpt"
    ae.save_codec(ckpt, nearest_point_codec())
    code = hn.run_cli(["eval-ser", "--codec", str(ckpt),
                       "--out", str(tmp_path / "run"), "--ebn0", "5",
                       "--min-symbols", "10"])
    assert code == hn.EXIT_CONFIG


def small_qam16_denoiser(tmp_path, n_steps=8):
    den = df.make_denoiser(2, 16, n_steps, np.random.default_rng(0),
                           hidden=8, depth=2)
    sched = df.build_schedule(n_steps, 0.05)
    path = tmp_path / "den.ckpt"
    df.save_denoiser(path, den, sched)
    return path


def test_gen_fidelity_qam16_outputs(tmp_path):
    ckpt = small_qam16_denoiser(tmp_path)
    out = tmp_path / "run"
    code = hn.run_cli(["gen-fidelity", "--surrogate", str(ckpt), "--qam16",
                       "--out", str(out), "--samples", "1000", "--seed", "3"])
    assert code == 0
    for name in ("norms.csv", "norms_true.csv", "constellation.csv",
                 "constellation_true.csv", "fidelity.csv", "plot_fidelity.py",
                 "manifest.txt", "surrogate.ckpt"):
        assert (out / name).is_file(), name
    body = (out / "fidelity.csv").read_text().splitlines()
    assert body[0] == "message,ks_norm,mean_err,cov_err"
    assert len(body) == 17


def test_gen_fidelity_dimension_mismatch(tmp_path):
    den = df.make_denoiser(3, 16, 4, np.random.default_rng(0), hidden=8, depth=2)
    path = tmp_path / "den3.ckpt"
    df.save_denoiser(path, den, df.build_schedule(4, 0.05))
    code = hn.run_cli(["gen-fidelity", "--surrogate", str(path), "--qam16",
                       "--out", str(tmp_path / "run"), "--samples", "1000"])
    assert code == hn.EXIT_CONFIG


def test_gen_fidelity_rejects_tiny_sample_count(tmp_path):
    ckpt = small_qam16_denoiser(tmp_path)
    code = hn.run_cli(["gen-fidelity", "--surrogate", str(ckpt), "--qam16",
                       "--out", str(tmp_path / "run"), "--samples", "10"])
    assert code == hn.EXIT_CONFIG


def test_dump_trajectory_outputs(tmp_path):
    n_steps = 6
    ckpt = small_qam16_denoiser(tmp_path, n_steps)
    out = tmp_path / "run"
    code = hn.run_cli(["dump-trajectory", "--surrogate", str(ckpt), "--qam16",
                       "--message", "3", "--out", str(out), "--samples", "4"])
    assert code == 0
    for name in ("trajectory_forward.csv", "trajectory_reverse.csv",
                 "plot_trajectory.py", "manifest.txt"):
        assert (out / name).is_file(), name
    for name in ("trajectory_forward.csv", "trajectory_reverse.csv"):
        lines = (out / name).read_text().splitlines()
        assert lines[0] == "t,sample_idx,dim0,dim1"
        assert len(lines) == 1 + (n_steps + 1) * 4
        ts = {int(line.split(",")[0]) for line in lines[1:]}
        assert ts == set(range(n_steps + 1))


def test_dump_trajectory_rejects_wgan(tmp_path):
    import e2ediff.wgan as wg
    pair = wg.make_wgan(2, np.random.default_rng(0), hidden=8)
    path = tmp_path / "w.ckpt"
    wg.save_wgan(path, pair)
    code = hn.run_cli(["dump-trajectory", "--surrogate", str(path), "--qam16",
                       "--message", "0", "--out", str(tmp_path / "run")])
    assert code == hn.EXIT_CONFIG


def test_dump_trajectory_message_range(tmp_path):
    ckpt = small_qam16_denoiser(tmp_path)
    code = hn.run_cli(["dump-trajectory", "--surrogate", str(ckpt), "--qam16",
                       "--message", "16", "--out", str(tmp_path / "run")])
    assert code == hn.EXIT_CONFIG


def test_quick_fig2_recipe_end_to_end(tmp_path):
    out = tmp_path / "fig2"
    assert hn.run_cli(["recipe", "fig2_awgn_qam16", "--quick",
                       "--out", str(out)]) == 0
    for name in ("config.txt", "seed.txt", "surrogate.ckpt", "loss_trace.csv",
                 "norms.csv", "norms_true.csv", "constellation.csv",
                 "constellation_true.csv", "fidelity.csv", "plot_fidelity.py",
                 "manifest.txt"):
        assert (out / name).is_file(), name
    den, sched = df.load_denoiser(out / "surrogate.ckpt")
    assert sched.T == 100
    # norms cover all 16 messages at the quick sample count
    lines = (out / "norms.csv").read_text().splitlines()
    assert len(lines) == 1 + 16 * 1000


def test_quick_fig2_rerun_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert hn.run_cli(["recipe", "fig2_awgn_qam16", "--quick", "--out", str(out1)]) == 0
    assert hn.run_cli(["recipe", "fig2_awgn_qam16", "--quick", "--out", str(out2)]) == 0
    for name in ("norms.csv", "norms_true.csv", "constellation.csv",
                 "fidelity.csv", "loss_trace.csv", "surrogate.ckpt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_recipe_seed_override_changes_outputs(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert hn.run_cli(["recipe", "fig2_awgn_qam16", "--quick", "--out", str(out1),
                       "--seed", "1"]) == 0
    assert hn.run_cli(["recipe", "fig2_awgn_qam16", "--quick", "--out", str(out2),
                       "--seed", "2"]) == 0
    assert (out1 / "seed.txt").read_text() != (out2 / "seed.txt").read_text()
    assert (out1 / "norms.csv").read_bytes() != (out2 / "norms.csv").read_bytes()


def test_true_sampler_matches_qam16_codebook():
    book = hn._qam16_codec_book()
    assert book.shape == (16, 2)
    np.testing.assert_array_equal(book, QAM16)
