"""Command-line harness.

Every command resolves defaults <- config file <- --set overrides into one flat
key map, runs, and writes a manifest echoing the fully resolved config so the run
can be repeated without the original shell line. Run directories live under
--runs-root (or $MOTIONSCOPE_RUNS, or ./runs) and follow
runs/<name>/{manifest.json, checkpoints/, tables/, figures/, logs/}.

All emitted CSV/JSON is byte-deterministic given (config, seed); manifests carry
no timestamps. Failures print a single machine-readable JSON object to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .adapters import (
    LoraAdapterConfig,
    EVAL_COLUMNS,
    eval_to_row,
    evaluate_customization,
    init_adapter,
    load_adapter,
    make_eval_prompts,
    save_adapter,
    train_constrained,
)
from .analysis import (
    build_heatmaps,
    heatmap_to_csv,
    render_heatmap_png,
    render_tradeoff_png,
    select_threshold,
    summary_dict,
    tradeoff_curve,
    write_summary,
)
from .captions import sample_subject_edit
from .config import ConfigError, RunConfig, parse_overrides, write_manifest
from .model import DenoiserConfig, VideoDenoiser, load_checkpoint, save_checkpoint
from .probe import (
    TimestepWindow,
    read_records_csv,
    record_seed,
    records_to_csv,
    run_probe,
    sweep_corpus,
    window_grid,
)
from .rendering import DatasetSpec, corpus_hash, gen_dataset, load_dataset
from .schedule import build_schedule
from .scorer import load_scorer, save_scorer, subject_accuracy, train_scorer
from .training import train_base, validation_loss

RUN_SUBDIRS = ("checkpoints", "tables", "figures", "logs")

DATASET_DEFAULTS = {
    "colors": "red,green,blue",
    "shapes": "square,circle,triangle",
    "directions": "E,N,W,S",
    "speeds": "1,2",
    "seeds_per_combo": "2",
    "val_seeds": "1",
    "frames": "8",
    "image_size": "32",
    "shape_size": "5.0",
    "motion_jitter": "1.0",
    "seed": "0",
    "out": "",
}

TRAIN_BASE_DEFAULTS = {
    "dataset": "",
    "steps": "9000",
    "seed": "0",
    "batch_size": "8",
    "lr": "2e-4",
    "cond_dropout": "0.1",
    "slot_dropout": "0.1",
    "variant": "factorized",
    "width": "96",
    "depth": "4",
    "heads": "6",
    "cond_dim": "32",
    "patch_size": "4",
    "caption_repeat": "8",
    "T": "1000",
    "beta_start": "1e-4",
    "beta_end": "0.02",
    "beta_kind": "linear",
    "log_every": "0",
}

TRAIN_SCORER_DEFAULTS = {
    "dataset": "",
    "steps": "1200",
    "seed": "0",
    "batch_size": "64",
    "lr": "1e-3",
    "noise_std": "0.15",
    "noise_batch_every": "4",
}

PROBE_DEFAULTS = {
    "model": "",
    "scorer": "",
    "dataset": "",
    "video_id": "",
    "tau_start": "1000",
    "tau_end": "0",
    "n_steps": "50",
    "edit_color": "",
    "edit_shape": "",
    "seed": "0",
    "save_video": "true",
}

SWEEP_DEFAULTS = {
    "model": "",
    "scorer": "",
    "dataset": "",
    "split": "val",
    "n_clips": "20",
    "clip_ids": "",
    "interval": "100",
    "n_steps": "50",
    "seed": "0",
    "resume": "false",
    "workers": "1",
}

BOUNDARY_DEFAULTS = {
    "records": "",
    "T": "1000",
    "interval": "100",
    "tau_end": "0",
    "seed": "0",
}

CUSTOMIZE_DEFAULTS = {
    "model": "",
    "dataset": "",
    "video_id": "",
    "steps": "400",
    "seed": "0",
    "lr": "1e-4",
    "batch_size": "4",
    "rank": "4",
    "alpha": "8.0",
    "layers": "QKVO",
    "scope": "temporal",
    "tau": "0",
    "mode": "lora",
    "init_seed": "0",
}

EVAL_DEFAULTS = {
    "model": "",
    "scorer": "",
    "dataset": "",
    "video_id": "",
    "adapters": "",
    "labels": "",
    "include_base": "false",
    "n_samples": "20",
    "prompt_seed": "0",
    "n_steps": "50",
    "workers": "1",
}

REPORT_DEFAULTS = {
    "source": "",
    "T": "1000",
    "interval": "100",
    "tau_end": "0",
    "seed": "0",
}


def _runs_root(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get("MOTIONSCOPE_RUNS")
    return Path(env) if env else Path("runs")


def _prepare_run_dir(root: Path, name: str, command: str, resuming: bool = False) -> Path:
    """Claim runs_root/name. A manifest marks a completed run, which is never
    mutated; only `sweep --set resume=true` may continue its own directory.
    A directory without a manifest is a crashed run and is fair game."""
    run_dir = root / name
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        previous = json.loads(manifest.read_text())
        if not (resuming and previous.get("command") == command):
            raise ConfigError(
                f"run directory {run_dir} already holds a completed "
                f"{previous.get('command')!r} run; pick a new --name"
            )
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_loss_csv(path, losses: list[float]) -> None:
    lines = ["step,loss"]
    lines += [f"{i + 1},{repr(v)}" for i, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_base(cfg: RunConfig):
    model, sched, _ = load_checkpoint(cfg.get_path("model"))
    model.eval()
    return model, sched


def _caption_field(value: str) -> str | None:
    return value or None


def cmd_dataset(cfg: RunConfig, run_dir: Path) -> dict:
    spec = DatasetSpec(
        colors=tuple(cfg.get_list("colors")),
        shapes=tuple(cfg.get_list("shapes")),
        directions=tuple(cfg.get_list("directions")),
        speeds=tuple(cfg.get_int_list("speeds")),
        seeds_per_combo=cfg.get_int("seeds_per_combo"),
        val_seeds=cfg.get_int("val_seeds"),
        frames=cfg.get_int("frames"),
        image_size=cfg.get_int("image_size"),
        shape_size=cfg.get_float("shape_size"),
        motion_jitter=cfg.get_float("motion_jitter"),
        seed=cfg.get_int("seed"),
    )
    out = cfg.values["out"] or str(run_dir / "dataset")
    ds = gen_dataset(spec, out)
    return {
        "dataset_dir": str(out),
        "n_clips": len(ds.clips),
        "n_train": len(ds.train_clips),
        "n_val": len(ds.val_clips),
        "corpus_hash": corpus_hash(out),
    }


def cmd_train_base(cfg: RunConfig, run_dir: Path) -> dict:
    ds = load_dataset(cfg.get_path("dataset"))
    sched = build_schedule(
        cfg.get_int("T"),
        beta_start=cfg.get_float("beta_start"),
        beta_end=cfg.get_float("beta_end"),
        kind=cfg.get_str("beta_kind"),
    )
    torch.manual_seed(cfg.get_int("seed"))
    model = VideoDenoiser(
        DenoiserConfig(
            variant=cfg.get_str("variant"),
            width=cfg.get_int("width"),
            depth=cfg.get_int("depth"),
            heads=cfg.get_int("heads"),
            cond_dim=cfg.get_int("cond_dim"),
            patch_size=cfg.get_int("patch_size"),
            caption_repeat=cfg.get_int("caption_repeat"),
            frames=ds.spec.frames,
            image_size=ds.spec.image_size,
        )
    )
    result = train_base(
        model,
        sched,
        ds,
        steps=cfg.get_int("steps"),
        seed=cfg.get_int("seed"),
        batch_size=cfg.get_int("batch_size"),
        lr=cfg.get_float("lr"),
        cond_dropout=cfg.get_float("cond_dropout"),
        slot_dropout=cfg.get_float("slot_dropout"),
        log_every=cfg.get_int("log_every"),
    )
    val = validation_loss(model, sched, ds, seed=cfg.get_int("seed"))
    ckpt = run_dir / "checkpoints" / "base.pt"
    save_checkpoint(ckpt, model, sched, extra={"steps": cfg.get_int("steps"), "val_loss": val})
    _write_loss_csv(run_dir / "logs" / "loss.csv", result.losses)
    final = float(np.mean(result.losses[-100:])) if result.losses else None
    return {"checkpoint": str(ckpt), "val_loss": val, "final_loss": final,
            "params": model.count_params()}


def cmd_train_scorer(cfg: RunConfig, run_dir: Path) -> dict:
    ds = load_dataset(cfg.get_path("dataset"))
    scorer, losses = train_scorer(
        ds,
        steps=cfg.get_int("steps"),
        seed=cfg.get_int("seed"),
        batch_size=cfg.get_int("batch_size"),
        lr=cfg.get_float("lr"),
        noise_std=cfg.get_float("noise_std"),
        noise_batch_every=cfg.get_int("noise_batch_every"),
    )
    ckpt = run_dir / "checkpoints" / "scorer.pt"
    save_scorer(ckpt, scorer)
    _write_loss_csv(run_dir / "logs" / "loss.csv", losses)
    acc = subject_accuracy(scorer, ds.val_clips) if ds.val_clips else None
    return {"checkpoint": str(ckpt), "val_accuracy": acc}


def cmd_probe(cfg: RunConfig, run_dir: Path) -> dict:
    model, sched = _load_base(cfg)
    scorer = load_scorer(cfg.get_path("scorer"))
    ds = load_dataset(cfg.get_path("dataset"))
    clip = ds.get(cfg.get_str("video_id"))
    window = TimestepWindow(cfg.get_int("tau_start"), cfg.get_int("tau_end"))
    edit_color = _caption_field(cfg.values["edit_color"])
    edit_shape = _caption_field(cfg.values["edit_shape"])
    if edit_color or edit_shape:
        c_edit = clip.caption.with_subject(color=edit_color, shape=edit_shape)
    else:
        rng = np.random.default_rng(record_seed(clip.clip_id, cfg.get_int("seed")))
        c_edit = sample_subject_edit(clip.caption, rng)
    record = run_probe(
        clip, c_edit, window, model, scorer, sched,
        n_steps=cfg.get_int("n_steps"), keep_video=cfg.get_bool("save_video"),
    )
    records_to_csv([record], run_dir / "tables" / "probe.csv")
    saved = None
    if record.edited_video is not None and cfg.get_bool("save_video"):
        saved = run_dir / "tables" / "edited.npy"
        np.save(saved, record.edited_video.frames)
    return {
        "edit": c_edit.to_dict(),
        "appearance_gain": record.appearance_gain,
        "motion_preservation": record.motion_preservation,
        "edited_video": str(saved) if saved else None,
    }


def _pick_clips(cfg: RunConfig, ds) -> list:
    ids = cfg.values["clip_ids"]
    if ids:
        return [ds.get(i) for i in cfg.get_list("clip_ids")]
    split = cfg.get_str("split")
    if split == "all":
        clips = list(ds.clips)
    else:
        clips = ds.split(split)
    n = cfg.get_int("n_clips")
    return clips[:n] if n > 0 else clips


def _emit_boundary(records, T: int, interval: int, tau_end: int, seed: int,
                   tables: Path, strict: bool = True) -> dict:
    """Heatmap CSVs + threshold summary derived from a record table."""
    grid = build_heatmaps(records, T=T, interval=interval, strict=strict, seed=seed)
    curve = tradeoff_curve(records, tau_end=tau_end, seed=seed)
    choice = select_threshold(curve)
    heatmap_to_csv(grid, "appearance", tables / "heatmap_appearance.csv")
    heatmap_to_csv(grid, "motion", tables / "heatmap_motion.csv")
    summary = summary_dict(grid, curve, choice, extra={"T": T, "interval": interval})
    write_summary(summary, tables / "summary.json")
    return {
        "tau_star": choice.tau_star,
        "summary": str(tables / "summary.json"),
        "spearman_gain": summary["spearman_gain_vs_tau_start"],
        "spearman_preservation": summary["spearman_preservation_vs_tau_start"],
        "row_max_at_zero_fraction": summary["row_max_at_zero_fraction"],
    }


def cmd_sweep(cfg: RunConfig, run_dir: Path) -> dict:
    model, sched = _load_base(cfg)
    scorer = load_scorer(cfg.get_path("scorer"))
    ds = load_dataset(cfg.get_path("dataset"))
    clips = _pick_clips(cfg, ds)
    interval = cfg.get_int("interval")
    out = run_dir / "tables" / "records.csv"

    existing = []
    skip = None
    if cfg.get_bool("resume") and out.exists():
        existing = read_records_csv(out)
        skip = {(r.video_id, r.window.tau_start, r.window.tau_end) for r in existing}

    workers = cfg.get_int("workers")
    kwargs = dict(
        model=model, scorer=scorer, sched=sched, interval=interval,
        n_steps=cfg.get_int("n_steps"), seed=cfg.get_int("seed"), skip=skip,
    )
    if workers > 1:
        chunks = [clips[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ch: sweep_corpus(ch, **kwargs), chunks))
        new = [r for part in parts for r in part]
    else:
        new = sweep_corpus(clips, **kwargs)
    records = existing + new
    records_to_csv(records, out)
    summary = _emit_boundary(
        records, T=sched.T, interval=interval, tau_end=0, seed=cfg.get_int("seed"),
        tables=run_dir / "tables",
    )
    return {
        "records_csv": str(out),
        "n_records": len(records),
        "n_new": len(new),
        "n_windows": len(window_grid(sched.T, interval)),
        "clips": [c.clip_id for c in clips],
        **summary,
    }


def cmd_boundary(cfg: RunConfig, run_dir: Path) -> dict:
    records = read_records_csv(cfg.get_path("records"))
    return _emit_boundary(
        records,
        T=cfg.get_int("T"),
        interval=cfg.get_int("interval"),
        tau_end=cfg.get_int("tau_end"),
        seed=cfg.get_int("seed"),
        tables=run_dir / "tables",
    )


def cmd_customize(cfg: RunConfig, run_dir: Path) -> dict:
    model, sched = _load_base(cfg)
    ds = load_dataset(cfg.get_path("dataset"))
    reference = ds.get(cfg.get_str("video_id"))
    adapter_cfg = LoraAdapterConfig(
        rank=cfg.get_int("rank"),
        alpha=cfg.get_float("alpha"),
        target_layers=tuple(cfg.get_str("layers")),
        target_scope=cfg.get_str("scope"),
        tau=cfg.get_int("tau"),
        mode=cfg.get_str("mode"),
    )
    adapter = init_adapter(adapter_cfg, model, init_seed=cfg.get_int("init_seed"))
    losses = train_constrained(
        model, sched, adapter, reference,
        steps=cfg.get_int("steps"), seed=cfg.get_int("seed"),
        lr=cfg.get_float("lr"), batch_size=cfg.get_int("batch_size"),
    )
    ckpt = run_dir / "checkpoints" / "adapter.pt"
    save_adapter(ckpt, adapter)
    _write_loss_csv(run_dir / "logs" / "adapter_loss.csv", losses)
    return {
        "checkpoint": str(ckpt),
        "reference": reference.clip_id,
        "trainable_params": adapter.count_params(),
        "final_loss": losses[-1] if losses else None,
    }


def cmd_eval(cfg: RunConfig, run_dir: Path) -> dict:
    model, sched = _load_base(cfg)
    scorer = load_scorer(cfg.get_path("scorer"))
    ds = load_dataset(cfg.get_path("dataset"))
    reference = ds.get(cfg.get_str("video_id"))
    n = cfg.get_int("n_samples")
    rng = np.random.default_rng(record_seed(reference.clip_id, cfg.get_int("prompt_seed")))
    prompts = make_eval_prompts(reference.caption, n, rng, ds.spec.colors, ds.spec.shapes)
    seeds = list(range(cfg.get_int("prompt_seed") * 100_000, cfg.get_int("prompt_seed") * 100_000 + n))

    adapter_paths = cfg.get_list("adapters") if cfg.values["adapters"] else []
    labels = cfg.get_list("labels") if cfg.values["labels"] else [
        Path(p).parent.parent.name or Path(p).stem for p in adapter_paths
    ]
    if len(labels) != len(adapter_paths):
        raise ConfigError("labels must match adapters one-to-one", key="labels")
    if not adapter_paths and not cfg.get_bool("include_base"):
        raise ConfigError("nothing to evaluate: no adapters and include_base=false",
                          key="adapters")
    entries: list[tuple[str, object]] = []
    if cfg.get_bool("include_base"):
        entries.append(("base", None))
    entries += [(label, load_adapter(path, model)) for label, path in zip(labels, adapter_paths)]

    def run_one(entry):
        label, adapter = entry
        result = evaluate_customization(
            model, adapter, reference, prompts, scorer, sched, seeds,
            n_steps=cfg.get_int("n_steps"),
        )
        return eval_to_row(label, None if adapter is None else adapter.cfg, result)

    workers = cfg.get_int("workers")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, entries))
    else:
        rows = [run_one(e) for e in entries]
    out = run_dir / "tables" / "eval.csv"
    lines = [",".join(EVAL_COLUMNS)] + [",".join(row) for row in rows]
    out.write_text("\n".join(lines) + "\n")
    return {"eval_csv": str(out), "n_rows": len(rows), "reference": reference.clip_id}


def cmd_report(cfg: RunConfig, run_dir: Path) -> dict:
    source = cfg.get_path("source")
    records_path = source / "tables" / "records.csv"
    if not records_path.is_file():
        raise ConfigError(f"no records table at {records_path}", key="source")
    records = read_records_csv(records_path)
    T = cfg.get_int("T")
    interval = cfg.get_int("interval")
    seed = cfg.get_int("seed")
    grid = build_heatmaps(records, T=T, interval=interval, strict=False, seed=seed)
    curve = tradeoff_curve(records, tau_end=cfg.get_int("tau_end"), seed=seed)
    choice = select_threshold(curve)
    figures = run_dir / "figures"
    render_heatmap_png(grid, "appearance", figures / "heatmap_appearance.png",
                       title="appearance gain")
    render_heatmap_png(grid, "motion", figures / "heatmap_motion.png",
                       title="motion preservation")
    render_tradeoff_png(curve, figures / "tradeoff.png", tau_star=choice.tau_star)

    lines = [
        "# Probe sweep report",
        "",
        f"Source: `{source}`",
        f"Records: {len(records)}  Grid interval: {interval}  T: {T}",
        f"Selected threshold tau_star = **{choice.tau_star}** (rule: {choice.rule})",
        "",
        "| tau_start | appearance gain | motion preservation |",
        "|-----------|-----------------|---------------------|",
    ]
    for p in curve:
        lines.append(
            f"| {p.tau_start} | {p.appearance_gain:.6f} +- {p.appearance_se:.6f} "
            f"| {p.motion_preservation:.6f} +- {p.motion_se:.6f} |"
        )
    eval_path = source / "tables" / "eval.csv"
    if eval_path.is_file():
        lines += ["", "## Customization eval", "", "```", eval_path.read_text().strip(), "```"]
    report = run_dir / "report.md"
    report.write_text("\n".join(lines) + "\n")
    return {"report": str(report), "tau_star": choice.tau_star}


COMMANDS = {
    "dataset": (cmd_dataset, DATASET_DEFAULTS),
    "train-base": (cmd_train_base, TRAIN_BASE_DEFAULTS),
    "train-scorer": (cmd_train_scorer, TRAIN_SCORER_DEFAULTS),
    "probe": (cmd_probe, PROBE_DEFAULTS),
    "sweep": (cmd_sweep, SWEEP_DEFAULTS),
    "boundary": (cmd_boundary, BOUNDARY_DEFAULTS),
    "customize": (cmd_customize, CUSTOMIZE_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "report": (cmd_report, REPORT_DEFAULTS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionscope",
        description="Timestep-boundary probing and motion customization experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--name", required=True, help="run directory name")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--runs-root", default=None, help="runs root directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # single-threaded math keeps reruns byte-identical across machines
    torch.set_num_threads(1)
    fn, defaults = COMMANDS[args.command]
    try:
        cfg = RunConfig.resolve(defaults, args.config, parse_overrides(args.set))
        resuming = args.command == "sweep" and cfg.get_bool("resume")
        run_dir = _prepare_run_dir(
            _runs_root(args.runs_root), args.name, args.command, resuming=resuming
        )
        extra = fn(cfg, run_dir)
        write_manifest(run_dir / "manifest.json", args.command, cfg, extra=extra)
        print(json.dumps({"run_dir": str(run_dir), **(extra or {})}, sort_keys=True))
        return 0
    except ConfigError as err:
        payload = {"error": {"type": "config", "message": str(err), "key": err.key}}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1
    except Exception as err:  # structured failure for scripting
        payload = {"error": {"type": type(err).__name__, "message": str(err)}}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
