"""Command-line surface: flat-key configs, subcommands, inspection outputs.

Configuration is a single flat JSON namespace shared by every subcommand:
model fields, training fields, and IO fields all live side by side, flags
override file values, and any unrecognized key is an error. Each invocation
echoes the fully resolved configuration to resolved_config.json in the
output directory so a run can always be reproduced from its artifacts.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import (ConfigError, ConfigTypeError, DataError, MissingRequired,
                     NumericError, OutOfBounds, ShapeMismatch, UnknownKey)
from .model import ModelConfig, attention_maps, forward_pass
from .sceneio import (find_scene_dirs, load_scene, load_scene_dirs, write_ply,
                      write_ppm, write_scene_dir)
from .synth import PROFILES, generate_scene
from .tokenizer import tokenize_scene, unpatchify
from .train import (TrainConfig, default_scenes, load_checkpoint,
                    model_for_profile, pipeline_grad_error, run_training)

GRADCHECK_TOLERANCE = 1e-4

_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}

# IO keys are untyped dataclass-wise, so expected types live here. None
# defaults mean "not set"; out_dir is the one key every subcommand requires.
_IO_DEFAULTS = {
    "out_dir": None,
    "scene_dir": None,
    "num_scenes": None,
    "checkpoint": None,
    "scene_index": 0,
    "attn_layer": "enc_shared.0",
    "attn_head": 0,
    "attn_query": 0,
    "max_coords": None,
}
_IO_TYPES = {
    "out_dir": str,
    "scene_dir": str,
    "num_scenes": int,
    "checkpoint": str,
    "scene_index": int,
    "attn_layer": (int, str),
    "attn_head": int,
    "attn_query": int,
    "max_coords": int,
}

_ALL_KEYS = sorted(set(_MODEL_FIELDS) | set(_TRAIN_FIELDS)
                   | set(_IO_DEFAULTS) | {"mask_ratio"})


@dataclasses.dataclass
class RunConfig:
    """Fully resolved invocation: model + training + IO selections."""
    model: ModelConfig
    train: TrainConfig
    out_dir: Path
    scene_dir: str | None = None
    num_scenes: int | None = None
    checkpoint: str | None = None
    scene_index: int = 0
    attn_layer: int | str = "enc_shared.0"
    attn_head: int = 0
    attn_query: int = 0
    max_coords: int | None = None


def _checked(key, value, expected):
    """Type-check one config value; ints are welcome where floats are due."""
    if expected is bool or expected == "bool":
        if not isinstance(value, bool):
            raise ConfigTypeError(f"{key} expects a bool, got {value!r}")
        return value
    if expected is int or expected == "int":
        # bool is an int subclass; reject it so "true" can't sneak into counts
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(f"{key} expects an int, got {value!r}")
        return value
    if expected is float or expected == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(f"{key} expects a number, got {value!r}")
        return float(value)
    if expected is str or expected == "str":
        if not isinstance(value, str):
            raise ConfigTypeError(f"{key} expects a string, got {value!r}")
        return value
    if expected is tuple or expected == "tuple":  # betas
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for v in value)):
            raise ConfigTypeError(f"{key} expects two numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(expected, tuple):  # e.g. attn_layer: int or str
        if isinstance(value, bool) or not isinstance(value, expected):
            raise ConfigTypeError(f"{key} expects {expected}, got {value!r}")
        return value
    raise ConfigTypeError(f"{key} has no checkable type {expected!r}")


def parse_config(file_values=None, flag_values=None,
                 base_model=None, base_train=None) -> RunConfig:
    """Merge file and flag values over defaults into a RunConfig.

    Flags override file values key by key. base_model/base_train replace the
    built-in defaults (used to inherit a checkpoint's configuration); an
    explicit profile key rebases the model on that profile instead.
    """
    merged = dict(file_values or {})
    merged.update(flag_values or {})

    for key in merged:
        if key not in _ALL_KEYS:
            raise UnknownKey(f"unknown config key {key!r}")

    # mask_ratio is shorthand for both ratios; explicit keys win
    if "mask_ratio" in merged:
        ratio = _checked("mask_ratio", merged.pop("mask_ratio"), float)
        merged.setdefault("r_p", ratio)
        merged.setdefault("r_i", ratio)

    train_kwargs = {k: _checked(k, v, _TRAIN_FIELDS[k])
                    for k, v in merged.items() if k in _TRAIN_FIELDS}
    model_kwargs = {k: _checked(k, v, _MODEL_FIELDS[k])
                    for k, v in merged.items() if k in _MODEL_FIELDS}
    io_kwargs = {k: _checked(k, v, _IO_TYPES[k])
                 for k, v in merged.items() if k in _IO_DEFAULTS}

    try:
        if base_train is not None:
            train = dataclasses.replace(base_train, **train_kwargs)
        else:
            train = TrainConfig(**train_kwargs)
        if base_model is not None and "profile" not in merged:
            model = dataclasses.replace(base_model, **model_kwargs)
        else:
            model = model_for_profile(train.profile, **model_kwargs)
    except ShapeMismatch as e:
        # the dataclasses validate value domains; surface that as config abuse
        raise ConfigTypeError(str(e)) from None

    io = dict(_IO_DEFAULTS)
    io.update(io_kwargs)
    if io["out_dir"] is None:
        raise MissingRequired("out_dir is required")
    return RunConfig(model=model, train=train, out_dir=Path(io.pop("out_dir")),
                     **io)


def resolved_dict(rc: RunConfig) -> dict:
    """The flat key space of a RunConfig, ready for resolved_config.json."""
    flat = dataclasses.asdict(rc.model)
    flat.update(dataclasses.asdict(rc.train))
    flat["betas"] = list(rc.train.betas)
    for key in _IO_DEFAULTS:
        flat[key] = getattr(rc, key)
    flat["out_dir"] = str(rc.out_dir)
    return flat


def _write_resolved(rc: RunConfig):
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "resolved_config.json", "w") as fh:
        json.dump(resolved_dict(rc), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _max_workers():
    raw = os.environ.get("PIMAE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigTypeError(f"PIMAE_THREADS must be an integer, got {raw!r}") from None


def _scene_for_inspection(rc: RunConfig):
    """scene_index'th scene: from scene_dir when given, else synthesized."""
    profile = PROFILES[rc.train.profile]
    if rc.scene_dir is not None:
        dirs = find_scene_dirs(rc.scene_dir)
        if not 0 <= rc.scene_index < len(dirs):
            raise OutOfBounds(
                f"scene_index {rc.scene_index} out of range ({len(dirs)} scenes)")
        return load_scene(dirs[rc.scene_index], profile.n_points)
    return generate_scene(rc.train.seed * 10_000 + rc.scene_index, profile)


def _tokenize(rc: RunConfig, scene, step: int):
    """The same mask draw the trainer would make for this scene at step."""
    rng = np.random.default_rng(
        np.random.SeedSequence((rc.train.seed, step, rc.scene_index)))
    return tokenize_scene(scene, rc.model.num_clusters, rc.model.group_size,
                          rc.model.patch_size, rc.train.strategy,
                          rc.train.r_p, rc.train.r_i, rng)


# --- subcommands ---

def _cmd_pretrain(rc: RunConfig) -> int:
    if rc.scene_dir is not None:
        n_points = PROFILES[rc.train.profile].n_points
        scenes = load_scene_dirs(rc.scene_dir, n_points,
                                 max_workers=_max_workers())
    else:
        scenes = default_scenes(rc.train, count=rc.num_scenes)
    run_training(rc.train, rc.model, rc.out_dir, scenes=scenes,
                 resume_from=rc.checkpoint)
    return 0


def _cmd_reconstruct(rc: RunConfig, ckpt) -> int:
    scene = _scene_for_inspection(rc)
    tokens, patches, _ = _tokenize(rc, scene, ckpt.step)
    with dc.no_grad():
        _, preds = forward_pass(scene.points, tokens, patches,
                                ckpt.weights, rc.model)
    if preds.image_pixels is not None:
        full = patches.patches.copy()
        full[~patches.visible_mask] = preds.image_pixels.data
        write_ppm(rc.out_dir / "recon_image.ppm",
                  unpatchify(full, patches.grid))
    if preds.point_offsets is not None:
        parts, flags = [], []
        for cid in tokens.visible_ids:
            parts.append(scene.points[tokens.groups[cid]])
            flags.append(np.zeros(tokens.k, dtype=int))
        for row, cid in enumerate(tokens.masked_ids):
            parts.append(tokens.centers[cid] + preds.point_offsets.data[row])
            flags.append(np.ones(tokens.k, dtype=int))
        write_ply(rc.out_dir / "recon_points.ply", np.vstack(parts),
                  masked=np.concatenate(flags))
    return 0


def _cmd_mask_vis(rc: RunConfig) -> int:
    scene = _scene_for_inspection(rc)
    tokens, patches, align = _tokenize(rc, scene, 0)
    full = patches.patches.copy()
    full[~patches.visible_mask] *= 0.5
    write_ppm(rc.out_dir / "mask_image.ppm", unpatchify(full, patches.grid))
    hits = {
        "strategy": align.strategy,
        "hit_visible": [int(i) for i in align.hit_visible],
        "hit_masked": [int(i) for i in align.hit_masked],
        "dropped": int(align.dropped),
        "masked_patches": int(len(patches.masked_ids)),
        "masked_clusters": int(len(tokens.masked_ids)),
    }
    with open(rc.out_dir / "hits.json", "w") as fh:
        json.dump(hits, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_attn_dump(rc: RunConfig, ckpt) -> int:
    scene = _scene_for_inspection(rc)
    tokens, patches, _ = _tokenize(rc, scene, ckpt.step)
    with dc.no_grad():
        lat, _ = forward_pass(scene.points, tokens, patches, ckpt.weights,
                              rc.model, retain_attention=True)
    layer = rc.attn_layer
    if isinstance(layer, int):
        if not 0 <= layer < len(lat.attn_order):
            raise OutOfBounds(f"layer {layer} out of range "
                              f"({len(lat.attn_order)} retained)")
        layer = lat.attn_order[layer]
    row = attention_maps(lat, layer, rc.attn_head, rc.attn_query)
    name = f"attn_{layer}_{rc.attn_head}_{rc.attn_query}.json"
    payload = {"layer": layer, "head": rc.attn_head, "query": rc.attn_query,
               "weights": row.tolist()}
    with open(rc.out_dir / name, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_gradcheck(rc: RunConfig) -> int:
    err = pipeline_grad_error(max_coords=rc.max_coords)
    print(f"max relative error {err:.6e}")
    with open(rc.out_dir / "gradcheck.json", "w") as fh:
        json.dump({"max_relative_error": err,
                   "tolerance": GRADCHECK_TOLERANCE}, fh, indent=1,
                  sort_keys=True)
        fh.write("\n")
    if err >= GRADCHECK_TOLERANCE:
        raise NumericError(
            f"gradient check failed: {err:.6e} >= {GRADCHECK_TOLERANCE:g}")
    return 0


def _cmd_synth_gen(rc: RunConfig) -> int:
    profile = PROFILES[rc.train.profile]
    count = rc.num_scenes if rc.num_scenes is not None else rc.train.batch_size
    for i in range(count):
        scene = generate_scene(rc.train.seed * 10_000 + i, profile)
        write_scene_dir(rc.out_dir / f"scene_{i:04d}", scene)
    return 0


_COMMANDS = {
    "pretrain": "train a model on synthetic or on-disk scenes",
    "reconstruct": "emit reconstructed image and point cloud from a checkpoint",
    "mask-vis": "emit the mask pattern and projection-hit bookkeeping",
    "attn-dump": "emit one attention row from a checkpointed model",
    "gradcheck": "run the end-to-end gradient check on the tiny profile",
    "synth-gen": "write synthetic scenes to disk as scene directories",
}
_NEEDS_CHECKPOINT = ("reconstruct", "attn-dump")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pimae",
        description="masked-autoencoder pre-training for point clouds + images")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, blurb in _COMMANDS.items():
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="JSON config file (flags override it)")
        for key in _ALL_KEYS:
            p.add_argument(f"--{key}", default=None, metavar="V", dest=key,
                           help=argparse.SUPPRESS)
    return ap


def _flag_value(raw: str):
    """JSON when it parses, bare string otherwise (lets --strategy=uniform work)."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            parsed = json.load(fh)
    except OSError as e:
        raise ConfigTypeError(f"cannot read config file: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigTypeError(f"config file is not valid JSON: {e}") from None
    if not isinstance(parsed, dict):
        raise ConfigTypeError("config file must hold a JSON object")
    return parsed


def cli(argv=None) -> int:
    ns = _build_parser().parse_args(argv)
    try:
        file_values = _read_config_file(ns.config) if ns.config else {}
        flag_values = {k: _flag_value(v) for k, v in vars(ns).items()
                       if k in _ALL_KEYS and v is not None}

        if ns.command in _NEEDS_CHECKPOINT or (
                ns.command == "mask-vis"
                and (flag_values.get("checkpoint")
                     or file_values.get("checkpoint"))):
            path = flag_values.get("checkpoint", file_values.get("checkpoint"))
            if path is None:
                raise MissingRequired(f"{ns.command} requires a checkpoint")
            ckpt = load_checkpoint(path)
            rc = parse_config(file_values, flag_values,
                              base_model=ckpt.model_config,
                              base_train=ckpt.train_config)
            if rc.model != ckpt.model_config:
                raise ShapeMismatch(
                    "config overrides disagree with the checkpoint's model")
        else:
            ckpt = None
            rc = parse_config(file_values, flag_values)

        _write_resolved(rc)
        if ns.command == "pretrain":
            return _cmd_pretrain(rc)
        if ns.command == "reconstruct":
            return _cmd_reconstruct(rc, ckpt)
        if ns.command == "mask-vis":
            return _cmd_mask_vis(rc)
        if ns.command == "attn-dump":
            return _cmd_attn_dump(rc, ckpt)
        if ns.command == "gradcheck":
            return _cmd_gradcheck(rc)
        return _cmd_synth_gen(rc)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def main():
    raise SystemExit(cli())
