"""CLI surface: config resolution, subcommand outputs, exit codes."""

import json
import math

import numpy as np
import pytest

from pimae import cli as C
from pimae.errors import ConfigTypeError, MissingRequired, UnknownKey
from pimae.sceneio import read_ply, read_ppm
from pimae.train import load_checkpoint, lr_at, TrainConfig


def run_cli(*args) -> int:
    return C.cli([str(a) for a in args])


def tiny_args(out_dir, **extra):
    base = {"profile": "tiny", "total_steps": 3, "warmup_steps": 1,
            "batch_size": 2, "out_dir": out_dir}
    base.update(extra)
    flags = []
    for k, v in base.items():
        if not isinstance(v, str):
            v = str(v) if hasattr(v, "exists") else json.dumps(v)
        flags += [f"--{k}", v]
    return flags


# --- config parsing ---

def test_parse_config_defaults_to_desk_profile():
    rc = C.parse_config({}, {"out_dir": "x"})
    assert rc.train.profile == "desk"
    assert rc.model.enc_dim == 64 and rc.model.num_clusters == 16  # desk model
    assert rc.train.r_p == 0.6 and rc.train.r_i == 0.6


def test_parse_config_mask_ratio_expands_and_explicit_wins():
    rc = C.parse_config({"mask_ratio": 0.7}, {"out_dir": "x"})
    assert rc.train.r_p == 0.7 and rc.train.r_i == 0.7
    rc = C.parse_config({"mask_ratio": 0.7, "r_p": 0.5}, {"out_dir": "x"})
    assert rc.train.r_p == 0.5 and rc.train.r_i == 0.7


def test_parse_config_flag_overrides_file():
    rc = C.parse_config({"strategy": "complement", "out_dir": "x"},
                        {"strategy": "uniform"})
    assert rc.train.strategy == "uniform"


def test_parse_config_rejects_typos():
    with pytest.raises(UnknownKey):
        C.parse_config({"mask_rato": 0.6}, {"out_dir": "x"})


def test_parse_config_type_errors():
    with pytest.raises(ConfigTypeError):
        C.parse_config({"r_p": "daft"}, {"out_dir": "x"})
    with pytest.raises(ConfigTypeError):
        C.parse_config({"total_steps": 1.5}, {"out_dir": "x"})
    with pytest.raises(ConfigTypeError):
        C.parse_config({"total_steps": True}, {"out_dir": "x"})
    with pytest.raises(ConfigTypeError):
        C.parse_config({"cross_modal": 1}, {"out_dir": "x"})
    with pytest.raises(ConfigTypeError):
        C.parse_config({"betas": [0.9]}, {"out_dir": "x"})
    # value-domain violations surface as config errors, not data errors
    with pytest.raises(ConfigTypeError):
        C.parse_config({"base_lr": -1.0}, {"out_dir": "x"})


def test_parse_config_requires_out_dir():
    with pytest.raises(MissingRequired):
        C.parse_config({"mask_ratio": 0.6}, {})


def test_parse_config_profile_switches_model():
    rc = C.parse_config({"profile": "tiny"}, {"out_dir": "x"})
    assert rc.model.enc_dim == 32 and rc.model.num_clusters == 8
    rc = C.parse_config({"profile": "tiny", "enc_dim": 64}, {"out_dir": "x"})
    assert rc.model.enc_dim == 64  # explicit override on top of the profile


def test_parse_config_betas_list_becomes_tuple():
    rc = C.parse_config({"betas": [0.8, 0.9]}, {"out_dir": "x"})
    assert rc.train.betas == (0.8, 0.9)


# --- synth-gen and pretrain ---

def test_synth_gen_writes_scene_dirs_reproducibly(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("synth-gen", *tiny_args(out, num_scenes=2)) == 0
    for sub in ("scene_0000", "scene_0001"):
        for name in ("points.ply", "image.ppm", "camera.json"):
            pa, pb = a / sub / name, b / sub / name
            assert pa.exists()
            assert pa.read_bytes() == pb.read_bytes()
    cfg = json.loads((a / "resolved_config.json").read_text())
    assert cfg["num_scenes"] == 2 and cfg["profile"] == "tiny"


def test_pretrain_synthetic_writes_metrics_and_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert run_cli("pretrain", *tiny_args(out)) == 0
    rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert rows[0]["lr"] == lr_at(1, TrainConfig(
        profile="tiny", total_steps=3, warmup_steps=1, batch_size=2))
    ckpt = load_checkpoint(out / "checkpoint.bin")
    assert ckpt.step == 3 and ckpt.train_config.profile == "tiny"


def test_pretrain_from_scene_dir_matches_synthetic(tmp_path):
    data, run_a, run_b = tmp_path / "data", tmp_path / "a", tmp_path / "b"
    assert run_cli("synth-gen", *tiny_args(data, num_scenes=2)) == 0
    assert run_cli("pretrain", *tiny_args(run_a, scene_dir=str(data))) == 0
    assert run_cli("pretrain", *tiny_args(run_b)) == 0  # same seed, in memory
    la = [json.loads(l) for l in (run_a / "metrics.jsonl").read_text().splitlines()]
    lb = [json.loads(l) for l in (run_b / "metrics.jsonl").read_text().splitlines()]
    # pixel quantization (1/255) perturbs every loss through the shared
    # encoder, so disk-loaded and in-memory runs agree only to that scale
    assert len(la) == len(lb) == 3
    for ra, rb in zip(la, lb):
        assert abs(ra["loss_img"] - rb["loss_img"]) < 1e-2
        assert abs(ra["loss_pc"] - rb["loss_pc"]) < 1e-3
        assert abs(ra["loss_cross"] - rb["loss_cross"]) < 1e-2


def test_pretrain_resume_via_checkpoint_flag(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert run_cli("pretrain", *tiny_args(first, total_steps=2)) == 0
    assert run_cli("pretrain", *tiny_args(
        second, checkpoint=str(first / "checkpoint.bin"))) == 0
    rows = [json.loads(l) for l in (second / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [3]  # continues past the stored step


# --- inspection commands ---

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert run_cli("pretrain", *tiny_args(out)) == 0
    return out


def test_reconstruct_outputs(tmp_path, trained):
    out = tmp_path / "recon"
    assert run_cli("reconstruct", *tiny_args(
        out, checkpoint=str(trained / "checkpoint.bin"))) == 0
    img = read_ppm(out / "recon_image.ppm")
    assert img.shape == (16, 20, 3)
    pts, extras = read_ply(out / "recon_points.ply")
    assert pts.shape == (8 * 4, 3)  # tiny profile: 8 clusters of 4
    flags = extras["masked"]
    # floor(0.6 * 8) = 4 masked clusters of 4 points each
    assert int(flags.sum()) == 4 * 4
    assert set(np.unique(flags)) == {0.0, 1.0}


def test_reconstruct_is_byte_reproducible(tmp_path, trained):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("reconstruct", *tiny_args(
            out, checkpoint=str(trained / "checkpoint.bin"))) == 0
    for name in ("recon_image.ppm", "recon_points.ply"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_mask_vis_outputs(tmp_path):
    out = tmp_path / "vis"
    assert run_cli("mask-vis", *tiny_args(out, strategy="uniform")) == 0
    masked = read_ppm(out / "mask_image.ppm")
    hits = json.loads((out / "hits.json").read_text())
    assert hits["strategy"] == "uniform"
    # tiny grid is 4x5 = 20 patches; uniform masks floor(0.6 * 20) = 12
    assert hits["masked_patches"] == 12
    assert hits["masked_clusters"] == 4
    assert hits["dropped"] >= 0
    assert all(0 <= i < 20 for i in hits["hit_visible"] + hits["hit_masked"])
    # darkening can only reduce intensity
    orig_dir = out / "orig"
    assert run_cli("mask-vis", *tiny_args(orig_dir, strategy="uniform", r_i=0.0)) == 0
    orig = read_ppm(orig_dir / "mask_image.ppm")
    assert masked.mean() < orig.mean()


def test_mask_vis_masked_patch_count_matches_complement_rule(tmp_path):
    out = tmp_path / "vis"
    assert run_cli("mask-vis", *tiny_args(out)) == 0  # complement strategy
    hits = json.loads((out / "hits.json").read_text())
    # complement keeps visible exactly the patches hit by masked clusters,
    # topped up; masked count is still floor(r_i * patch_count)
    assert hits["masked_patches"] == math.floor(0.6 * 20)
    assert len(hits["hit_visible"]) + len(hits["hit_masked"]) + hits["dropped"] >= 1


def test_attn_dump_row_sums_to_one(tmp_path, trained):
    out = tmp_path / "attn"
    assert run_cli("attn-dump", *tiny_args(
        out, checkpoint=str(trained / "checkpoint.bin"),
        attn_layer="enc_shared.0", attn_head=1, attn_query=2)) == 0
    payload = json.loads((out / "attn_enc_shared.0_1_2.json").read_text())
    assert payload["layer"] == "enc_shared.0"
    assert abs(sum(payload["weights"]) - 1.0) < 1e-9
    assert min(payload["weights"]) >= 0.0


def test_attn_dump_accepts_integer_layer(tmp_path, trained):
    out = tmp_path / "attn"
    assert run_cli("attn-dump", *tiny_args(
        out, checkpoint=str(trained / "checkpoint.bin"), attn_layer=0)) == 0
    files = list(out.glob("attn_*.json"))
    assert len(files) == 1
    payload = json.loads(files[0].read_text())
    assert abs(sum(payload["weights"]) - 1.0) < 1e-9


def test_gradcheck_subcommand_sampled(tmp_path):
    out = tmp_path / "gc"
    assert run_cli("gradcheck", "--out_dir", out, "--max_coords", "4") == 0
    payload = json.loads((out / "gradcheck.json").read_text())
    assert payload["max_relative_error"] < payload["tolerance"] == 1e-4


# --- resolved config echo ---

def test_resolved_config_is_sorted_and_complete(tmp_path):
    out = tmp_path / "vis"
    assert run_cli("mask-vis", *tiny_args(out, mask_ratio=0.5)) == 0
    text = (out / "resolved_config.json").read_text()
    cfg = json.loads(text)
    assert list(cfg) == sorted(cfg)
    assert cfg["r_p"] == 0.5 and cfg["r_i"] == 0.5
    assert "mask_ratio" not in cfg  # shorthand resolves away
    assert cfg["enc_dim"] == 32 and cfg["out_dir"] == str(out)


# --- exit codes ---

def test_exit_code_2_on_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"mask_rato": 0.6}')
    code = run_cli("pretrain", "--config", cfg, "--out_dir", tmp_path / "o")
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_exit_code_2_on_missing_out_dir(capsys):
    assert run_cli("mask-vis", "--profile", "tiny") == 2
    assert "out_dir" in capsys.readouterr().err


def test_exit_code_2_on_malformed_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert run_cli("mask-vis", "--config", cfg, "--out_dir", tmp_path / "o") == 2
    capsys.readouterr()


def test_exit_code_3_on_missing_checkpoint(tmp_path, capsys):
    code = run_cli("reconstruct", *tiny_args(
        tmp_path / "o", checkpoint=str(tmp_path / "absent.bin")))
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_exit_code_3_on_model_override_mismatch(tmp_path, trained, capsys):
    code = run_cli("reconstruct", *tiny_args(
        tmp_path / "o", checkpoint=str(trained / "checkpoint.bin"),
        dec_dim=24, dec_heads=2))
    assert code == 3
    assert "disagree" in capsys.readouterr().err


def test_exit_code_3_on_empty_scene_dir(tmp_path, capsys):
    empty = tmp_path / "nothing"
    empty.mkdir()
    code = run_cli("pretrain", *tiny_args(tmp_path / "o", scene_dir=str(empty)))
    assert code == 3
    capsys.readouterr()


def test_exit_code_2_requires_checkpoint_for_reconstruct(tmp_path, capsys):
    assert run_cli("reconstruct", *tiny_args(tmp_path / "o")) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_scene_index_out_of_range(tmp_path, trained, capsys):
    data = tmp_path / "data"
    assert run_cli("synth-gen", *tiny_args(data, num_scenes=1)) == 0
    code = run_cli("reconstruct", *tiny_args(
        tmp_path / "o", checkpoint=str(trained / "checkpoint.bin"),
        scene_dir=str(data), scene_index=5))
    assert code == 3
    capsys.readouterr()
