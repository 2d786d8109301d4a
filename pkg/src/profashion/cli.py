"""Command-line runner: synth, train, generate, gradcheck, inspect-ppa, evaluate.

Configuration is an INI file with one section per concern; ``--seed``,
``--out`` and ``--set section.key=value`` override it.  Every command writes
its fully resolved configuration next to its artifacts.

Exit codes: 0 ok, 1 configuration error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import diffusion as D
from . import model as M
from . import scenario as S
from .checks import offset_gradcheck, quadratic_selftest
from .config import ModelConfig
from .evalkit import evaluate_clip
from .numcore import ConfigError, DimensionError, EvaluationError, check_finite
from .poseflow import encode_pose, select_references
from .ppa import pose_aware_selector, scores_report
from .refenc import decode_latent
from .synthworld import export_clip, label_clip, make_turning_clip, write_ppm

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "run": {"seed": 0, "resolution": 32, "n_frames": 36, "n_refs": 3, "turn_rate": 2 * np.pi / 36,
            "n_chars": 4, "character": 99, "identical_refs": False},
    "model": {k: v for k, v in ModelConfig().as_dict().items()},
    "train": {"stage": 1, "steps": 500, "lr": 0.5, "momentum": 0.9, "lam": 0.1, "batch": 8,
              "clip_frames": 6, "ref_dropout": 0.1, "still_prob": 0.25},
    "sample": {"ddim_steps": 35, "cfg_scale": 3.5, "window": 12, "stride": 8, "clip_x0": True,
               "threshold_quantile": 0.995},
    "evaluate": {"seeds": [0, 1, 2, 3, 4], "counts": [3, 1], "stage1_steps": 1500, "stage2_steps": 200},
    "gradcheck": {"h": 1e-6, "lam": 0.1},
    "paths": {"checkpoint": "", "init_checkpoint": ""},
}


def _parse_value(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return None if text.lower() == "none" else float(text)
        if isinstance(like, (list, tuple)):
            items = [t for t in text.replace(",", " ").split()]
            kind = type(like[0]) if like else int
            return [kind(t) for t in items]
        if like is None:
            return None if text.lower() in ("", "none") else float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from exc
    return text


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve_config(path: str | None, sets: list, seed: int | None) -> dict:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    pairs = []
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from exc
        for sec in parser.sections():
            for key, val in parser.items(sec):
                pairs.append((sec, key, val))
    for item in sets or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, val = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        pairs.append((sec.strip(), key.strip(), val))
    for sec, key, val in pairs:
        if sec not in cfg or key not in cfg[sec]:
            raise ConfigError(f"unknown setting {sec}.{key}")
        cfg[sec][key] = _parse_value(val, DEFAULTS[sec][key])
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    run = cfg["run"]
    if run["n_refs"] < 1 or run["n_frames"] < 2 or run["resolution"] < 8:
        raise ConfigError("n_refs >= 1, n_frames >= 2 and resolution >= 8 required")
    return cfg


def write_config(cfg: dict, path: str) -> None:
    lines = []
    for sec in sorted(cfg):
        lines.append(f"[{sec}]")
        for key in sorted(cfg[sec]):
            lines.append(f"{key} = {_format_value(cfg[sec][key])}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def model_config(cfg: dict) -> ModelConfig:
    d = dict(cfg["model"])
    d["pose_widths"] = tuple(d["pose_widths"])
    d["global_widths"] = tuple(d["global_widths"])
    return ModelConfig(**d).validate()


def task_config(cfg: dict) -> S.TaskConfig:
    r, t, s = cfg["run"], cfg["train"], cfg["sample"]
    return S.TaskConfig(n_refs=r["n_refs"], n_frames=r["n_frames"], resolution=r["resolution"],
                        n_chars=r["n_chars"], lr=t["lr"], stage2_lr=t["lr"], lam=t["lam"],
                        ddim_steps=s["ddim_steps"], cfg_scale=s["cfg_scale"], window=s["window"],
                        stride=s["stride"])


def sample_config(cfg: dict) -> D.SampleConfig:
    s = cfg["sample"]
    return D.SampleConfig(ddim_steps=s["ddim_steps"], cfg_scale=s["cfg_scale"], window=s["window"],
                          stride=s["stride"], clip_x0=s["clip_x0"], threshold_quantile=s["threshold_quantile"])


def _dump_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _checkpoint_meta(cfg: dict) -> dict:
    return {"model": cfg["model"], "n_refs": cfg["run"]["n_refs"], "resolution": cfg["run"]["resolution"]}


def _load_model(cfg: dict, path: str, required: bool = True):
    mcfg = model_config(cfg)
    store = M.init_model(mcfg, cfg["run"]["seed"])
    if not path:
        if required:
            raise ConfigError("this command needs paths.checkpoint")
        return store, mcfg
    _, meta = D.load_checkpoint(path)
    if meta.get("model") != json.loads(json.dumps(cfg["model"])):
        raise ConfigError(f"{path}: checkpoint model config differs from the run config")
    D.load_checkpoint(path, store)
    return store, mcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: str) -> dict:
    r = cfg["run"]
    clip = make_turning_clip(S.char_seed(r["seed"], r["character"]), r["n_frames"], r["resolution"], r["turn_rate"])
    files = export_clip(clip, os.path.join(out, "clip"))
    views = [l.value for l in label_clip(clip)]
    summary = {"files": len(files), "views": {v: views.count(v) for v in sorted(set(views))}}
    _dump_json(summary, os.path.join(out, "synth.json"))
    return summary


def cmd_train(cfg: dict, out: str) -> dict:
    r, t = cfg["run"], cfg["train"]
    store, mcfg = _load_model(cfg, cfg["paths"]["init_checkpoint"], required=False)
    data = S.training_set(store, mcfg, task_config(cfg), r["seed"])
    tcfg = D.TrainConfig(**t)
    result = D.train_toy(store, mcfg, data, tcfg, np.random.default_rng([r["seed"], r["n_refs"], t["stage"]]))
    D.save_checkpoint(os.path.join(out, "checkpoint.pfc"), store, _checkpoint_meta(cfg))
    D.write_loss_csv(os.path.join(out, "loss.csv"), result)
    first, last = result.losses[:1], result.smoothed[-1:]
    summary = {"stage": t["stage"], "steps": t["steps"], "initial_loss": first[0] if first else None,
               "final_smoothed_loss": last[0] if last else None, "updated": len(result.updated)}
    _dump_json(summary, os.path.join(out, "train.json"))
    return summary


def cmd_generate(cfg: dict, out: str) -> dict:
    r = cfg["run"]
    store, mcfg = _load_model(cfg, cfg["paths"]["checkpoint"])
    clip = make_turning_clip(S.char_seed(r["seed"], r["character"]), r["n_frames"], r["resolution"], r["turn_rate"])
    sel = select_references(clip, r["n_refs"], np.random.default_rng([r["seed"], r["character"]]))
    cc = M.condition_clip(clip, sel.indices, store, mcfg)
    lat = D.generate_latents(store, mcfg, cc.pose_feats, cc.protos, sample_config(cfg),
                             np.random.default_rng([r["seed"], 7]))
    check_finite(lat, "generated latents")
    frames = np.clip(decode_latent(lat, mcfg.block_size, mcfg.image_channels), 0.0, 1.0)
    fdir = os.path.join(out, "frames")
    os.makedirs(fdir, exist_ok=True)
    for i, f in enumerate(frames):
        write_ppm(os.path.join(fdir, f"frame_{i:04d}.ppm"), f)
    # paths stay out of the hash so relocated reruns report the same run
    settings = {k: v for k, v in cfg.items() if k != "paths"}
    rep = evaluate_clip(frames, clip.frames, label_clip(clip), clip.parts > 0, r["seed"], settings)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(rep.to_json())
    return {"references": sel.indices, "warnings": sel.warnings, "view_mse": rep.view_mse,
            "mean_ssim": rep.mean_ssim}


def cmd_gradcheck(cfg: dict, out: str) -> dict:
    g = cfg["gradcheck"]
    quad = quadratic_selftest(cfg["run"]["seed"])
    off = offset_gradcheck(cfg["run"]["seed"], h=g["h"], lam=g["lam"])
    report = {"quadratic": quad.as_dict(), "offset_path": off.as_dict(),
              "pass": bool(quad.max_rel_error < 1e-8 and off.max_rel_error < 1e-4)}
    report["offset_path"]["worst_index"] = [int(i) for i in off.worst_index]
    report["quadratic"]["worst_index"] = [int(i) for i in quad.worst_index]
    _dump_json(report, os.path.join(out, "gradcheck.json"))
    if not np.isfinite(off.max_rel_error):
        raise EvaluationError("gradient check produced non-finite errors")
    return {"quadratic": quad.max_rel_error, "offset_path": off.max_rel_error, "pass": report["pass"]}


def cmd_inspect_ppa(cfg: dict, out: str) -> dict:
    r = cfg["run"]
    store, mcfg = _load_model(cfg, cfg["paths"]["checkpoint"], required=False)
    clip = make_turning_clip(S.char_seed(r["seed"], r["character"]), r["n_frames"], r["resolution"], r["turn_rate"])
    if r["identical_refs"]:
        first = select_references(clip, 1, np.random.default_rng([r["seed"], r["character"]])).indices[0]
        idx = [first] * r["n_refs"]
    else:
        idx = select_references(clip, r["n_refs"], np.random.default_rng([r["seed"], r["character"]])).indices
    maps = M.pose_maps(clip)
    maps_r = encode_pose(maps[idx], store)
    agg = pose_aware_selector(encode_pose(maps, store), maps_r, store, mcfg.selector_groups)
    text = scores_report(agg.m_s, label_clip(clip))
    with open(os.path.join(out, "ppa_scores.json"), "w") as fh:
        fh.write(text)
    table = ["frame view   " + " ".join(f"ref{j}({i:02d})" for j, i in enumerate(idx))]
    for f, (row, lbl) in enumerate(zip(agg.m_s, label_clip(clip))):
        table.append(f"{f:5d} {lbl.value:6s} " + " ".join(f"{v:9.4f}" for v in row))
    with open(os.path.join(out, "ppa_table.txt"), "w") as fh:
        fh.write("\n".join(table) + "\n")
    return {"references": idx, "table": os.path.join(out, "ppa_table.txt")}


def cmd_evaluate(cfg: dict, out: str) -> dict:
    e = cfg["evaluate"]
    task = task_config(cfg)
    task.stage1_steps, task.stage2_steps = e["stage1_steps"], e["stage2_steps"]
    rows = S.compare_reference_counts(e["seeds"], task, tuple(e["counts"]))
    hi, lo = e["counts"][0], e["counts"][-1]
    wins = sum(row[hi] < row[lo] for row in rows)
    report = {"back_view_mse": [{"seed": s, **{str(k): v for k, v in row.items()}} for s, row in zip(e["seeds"], rows)],
              "wins": wins, "seeds": len(rows), "counts": e["counts"]}
    _dump_json(report, os.path.join(out, "evaluate.json"))
    return {"wins": wins, "seeds": len(rows)}


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "generate": cmd_generate, "gradcheck": cmd_gradcheck,
    "inspect-ppa": cmd_inspect_ppa, "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profashion", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="INI file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        os.makedirs(args.out, exist_ok=True)
        write_config(cfg, os.path.join(args.out, "config.ini"))
        summary = COMMANDS[args.command](cfg, args.out)
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
