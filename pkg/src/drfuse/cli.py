"""``drfuse`` command line: generate, train-stage1, train-stage2, fuse, eval, report."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoints import build_codec, load_codec, load_fusion, save_codec, save_fusion
from .config import ConfigError, RunConfig, load_config, parse_config_lines
from .denoiser import ConditionAdapter, TemporalDenoiser
from .io import FormatError, read_frame, read_manifest, write_manifest, write_ppm
from .metrics import REPORT_COLUMNS, diff_map_render, frame_diff_energy, metrics_row, ssim, write_report_csv
from .numerics import Rng
from .sampler import FusionModels, rollout
from .scenes import crossing_scene_config, export_bundle, generate_sequence, load_bundle, random_scene_config, static_scene_config
from .training import PriorSettings, Stage2Settings, SyntheticCorpus, latent_scale, train_adapter, train_codec, train_prior

log = logging.getLogger("drfuse")

ABLATIONS = ("hg", "adapter", "refine", "h2")


class CliError(RuntimeError):
    pass


def _threads() -> int:
    raw = os.environ.get("DRFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"DRFUSE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    lines = list(getattr(args, "set", None) or [])
    for key in ("seed", "length", "flicker", "stage1_steps", "prior_steps", "stage2_steps", "lambda_temp", "lr", "scale", "steps"):
        val = getattr(args, key, None)
        if val is not None:
            lines.append(f"{key} = {val}")
    return parse_config_lines(lines, base=cfg)


# -- generate ------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(cfg.seed, (1,))
    names = []
    for i in range(args.sequences):
        if args.scene == "static":
            scene = static_scene_config(cfg.seed + i, cfg.frame_size, cfg.length, cfg.flicker, cfg.ir_noise)
        elif args.scene == "crossing":
            scene = crossing_scene_config(cfg.seed + i, cfg.frame_size, cfg.length, cfg.flicker, cfg.ir_noise)
        else:
            scene = random_scene_config(root.child(i, 0), cfg.frame_size, cfg.frame_size, cfg.length, cfg.n_objects, cfg.max_speed, (cfg.flicker, cfg.flicker), cfg.ir_noise)
        bundle = generate_sequence(scene, root.child(i, 1))
        name = f"seq_{i:04d}"
        meta = {"seed": str(cfg.seed), "index": str(i), "scene": args.scene, "flicker": repr(scene.flicker), "ir_noise": repr(scene.ir_noise)}
        export_bundle(bundle, out / name, meta)
        names.append(f"{name}/manifest.txt")
    write_manifest(out / "corpus.txt", {"sequence": names}, {"seed": str(cfg.seed), "sequences": str(args.sequences)})
    cfg.save(out / "config.txt")
    print(out / "corpus.txt")
    return 0


def load_corpus(path) -> SyntheticCorpus:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.txt"
    if not path.exists():
        raise CliError(f"no corpus manifest at {path}")
    entries, _ = read_manifest(path)
    seqs = entries.get("sequence", [])
    if not seqs:
        raise CliError(f"{path} lists no sequences")
    return SyntheticCorpus([load_bundle(path.parent / s) for s in seqs])


# -- training ------------------------------------------------------------------


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    corpus = load_corpus(args.data)
    if min(b.length for b in corpus.bundles) < 2 and cfg.lambda_temp > 0:
        raise CliError("temporal loss needs sequences of at least two frames")
    torch.manual_seed(Rng(cfg.seed, (21,)).torch_seed())
    codec, tlog = train_codec(corpus, cfg.stage1_steps, seed=cfg.seed, batch=cfg.stage1_batch, weights=cfg.stage1_weights(), lr=cfg.lr, codec=build_codec(cfg))
    out = Path(args.out)
    save_codec(out, codec, cfg, latent_scale(codec, corpus))
    tlog.write_csv(out / "loss.csv")
    print(f"stage1: loss {tlog.rows[0][1]:.6g} -> {tlog.rows[-1][1]:.6g}; checkpoint {out}")
    return 0


def cmd_train_stage2(args) -> int:
    if not (Path(args.stage1) / "manifest.txt").exists():
        raise CliError(f"missing stage-1 checkpoint at {args.stage1}")
    codec, scale, cfg1 = load_codec(args.stage1)
    cfg = _config(args)
    for key in ("latent_channels", "downsample", "codebook_size", "codec_hidden", "frame_size"):
        if getattr(cfg, key) != getattr(cfg1, key):
            raise CliError(f"config key {key} differs from the stage-1 checkpoint")
    corpus = load_corpus(args.data)
    prior = PriorSettings(steps=cfg.prior_steps, batch=cfg.prior_batch, lr=cfg.lr, history=cfg.history)
    den, plog = train_prior(codec, corpus, scale, prior, seed=cfg.seed, denoiser=TemporalDenoiser(cfg.denoiser()))
    models = FusionModels(codec, den, ConditionAdapter(width=cfg.width, stride_total=cfg.downsample * cfg.patch), scale)
    _, slog = train_adapter(models, corpus, Stage2Settings(cfg.stage2_steps, cfg.stage2_batch, cfg.lr, cfg.stage2_weights()), prior, seed=cfg.seed)
    out = Path(args.out)
    save_fusion(out, models, cfg)
    plog.write_csv(out / "prior_loss.csv")
    slog.write_csv(out / "loss.csv")
    print(f"stage2: prior {plog.rows[0][1]:.6g} -> {plog.rows[-1][1]:.6g}; adapter {slog.rows[0][1]:.6g} -> {slog.rows[-1][1]:.6g}; checkpoint {out}")
    return 0


# -- fuse / eval ---------------------------------------------------------------


def _read_stream(manifest, kind: str, limit: int | None = None):
    manifest = Path(manifest)
    entries, _ = read_manifest(manifest)
    paths = entries.get(kind, [])
    if not paths:
        raise CliError(f"{manifest} lists no {kind} frames")
    paths = paths[:limit] if limit else paths
    return torch.stack([torch.as_tensor(read_frame(manifest.parent / p)) for p in paths]).double()


def ablation_label(ablate: list[str]) -> str:
    return "full" if not ablate else "+".join(f"no_{a}" for a in sorted(set(ablate)))


def _extra_metrics(fused, bundle: object | None, n: int):
    """Per-frame SSIM against the composite target and background diff energy, if ground truth is known."""
    if bundle is None:
        return None
    target = bundle.composite()[:n]
    s_t = [ssim(fused[t], target[t]) for t in range(n)]
    bg = ~bundle.object_masks[:n]
    de_bg = [math.nan] + (list(frame_diff_energy(fused, bg)) if n > 1 else [])
    return s_t, de_bg


def write_metrics_csv(path, rows, extra) -> None:
    cols = [f for f in rows[0].__dataclass_fields__]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + (["ssim_target", "bg_diff_energy"] if extra else []))
        for i, r in enumerate(rows):
            vals = [getattr(r, c) for c in cols]
            if extra:
                vals += [extra[0][i], extra[1][i]]
            w.writerow([vals[0]] + [f"{v:.10g}" for v in vals[1:]])


def cmd_fuse(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.ckpt)
    if not (ckpt / "manifest.txt").exists():
        raise CliError(f"missing stage-2 checkpoint at {ckpt}")
    models, cfg_ckpt = load_fusion(ckpt)
    ablate = list(args.ablate or [])
    if args.ablate_guidance:
        ablate.append("hg")
    ir = _read_stream(args.ir, "ir", args.frames)
    vi = _read_stream(args.vi or args.ir, "vi", args.frames)
    if ir.shape != vi.shape:
        raise CliError(f"IR ({ir.shape[0]} frames) and VI ({vi.shape[0]} frames) sequences are not aligned")
    settings = cfg.sampler(_threads())
    settings.history = cfg_ckpt.history
    settings.use_guidance = "hg" not in ablate
    settings.use_adapter = "adapter" not in ablate
    settings.use_refinement = "refine" not in ablate
    settings.use_suppression = "h2" not in ablate

    bundle = None
    flows = masks = None
    try:
        bundle = load_bundle(args.ir)
        n = ir.shape[0]
        flows, masks = bundle.flows[: n - 1], bundle.masks[: n - 1]
    except (FormatError, FileNotFoundError, KeyError):
        bundle = None
    reference = bundle.composite()[: ir.shape[0]] if bundle is not None else None
    fused, report = rollout(ir, vi, models, settings, cfg.seed, flows, masks, reference, progress=lambda t: log.info("frame %d done", t))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(fused.shape[0]):
        write_ppm(out / f"fused_{t:04d}.ppm", fused[t].numpy())
        names.append(f"fused_{t:04d}.ppm")
    entries = {"fused": names}
    if args.diffmaps and fused.shape[0] > 1:
        maps = diff_map_render(fused)
        entries["diffmap"] = []
        for t in range(maps.shape[0]):
            write_ppm(out / f"diff_{t + 1:04d}.ppm", maps[t])
            entries["diffmap"].append(f"diff_{t + 1:04d}.ppm")
    write_manifest(out / "manifest.txt", entries, {"label": ablation_label(ablate), "seed": str(cfg.seed), "scale": repr(settings.effective_scale)})
    write_report_csv(out / "report.csv", report.rows, REPORT_COLUMNS)
    write_metrics_csv(out / "metrics.csv", report.rows, _extra_metrics(fused, bundle, fused.shape[0]))
    with open(out / "drift.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "diff_energy", "deviation"])
        for t in range(fused.shape[0]):
            de = report.diff_energy[t - 1] if t > 0 else math.nan
            w.writerow([t, f"{de:.10g}", f"{report.deviation[t]:.10g}"])
        w.writerow(["slope", f"{report.diff_slope:.10g}", f"{report.deviation_slope:.10g}"])
    print(out / "report.csv")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    if not (run / "manifest.txt").exists():
        raise CliError(f"no fused run at {run}")
    fused = _read_stream(run / "manifest.txt", "fused")
    ir = _read_stream(args.data, "ir", fused.shape[0])
    vi = _read_stream(args.data, "vi", fused.shape[0])
    if ir.shape != fused.shape:
        raise CliError("fused run and source sequence are not aligned")
    bundle = load_bundle(args.data)
    rows = [metrics_row(0, fused[0], ir[0], vi[0])]
    for t in range(1, fused.shape[0]):
        rows.append(metrics_row(t, fused[t], ir[t], vi[t], fused[t - 1], bundle.flows[t - 1], bundle.masks[t - 1]))
    write_report_csv(run / "eval.csv", rows, REPORT_COLUMNS)
    write_metrics_csv(run / "eval_metrics.csv", rows, _extra_metrics(fused, bundle, fused.shape[0]))
    for key, val in _means(run / "eval_metrics.csv").items():
        print(f"{key}\t{val:.6g}")
    return 0


# -- report --------------------------------------------------------------------


def _means(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path} has no rows")
    out = {}
    for key in rows[0]:
        if key == "frame":
            continue
        vals = np.array([float(r[key]) for r in rows])
        vals = vals[np.isfinite(vals)]
        out[key] = float(vals.mean()) if vals.size else math.nan
    return out


def aggregate_runs(run_dirs) -> list[tuple[str, dict[str, float]]]:
    table = []
    for d in run_dirs:
        d = Path(d)
        src = d / "metrics.csv" if (d / "metrics.csv").exists() else d / "report.csv"
        if not src.exists():
            raise CliError(f"no report in {d}")
        label = read_manifest(d / "manifest.txt")[1].get("label", d.name) if (d / "manifest.txt").exists() else d.name
        table.append((label, _means(src)))
    return table


def cmd_report(args) -> int:
    if not args.runs:
        raise CliError("report needs at least one run directory")
    table = aggregate_runs(args.runs)
    cols = ["cc", "en", "ssim", "diff_energy", "warped_residual"]
    cols += [c for c in ("ssim_target", "bg_diff_energy") if all(c in m for _, m in table)]
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run"] + cols)
            for label, m in table:
                w.writerow([label] + [f"{m[c]:.10g}" for c in cols])
    width = max(len(label) for label, _ in table) + 2
    print("run".ljust(width) + "".join(c.rjust(16) for c in cols))
    for label, m in table:
        print(label.ljust(width) + "".join(f"{m[c]:16.6g}" for c in cols))
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write synthetic IR/VI sequences with ground truth")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=int, default=1)
    g.add_argument("--length", type=int)
    g.add_argument("--flicker", type=float)
    g.add_argument("--scene", choices=("random", "static", "crossing"), default="random")
    g.set_defaults(func=cmd_generate)

    s1 = sub.add_parser("train-stage1", help="train the temporally constrained codec")
    common(s1)
    s1.add_argument("--data", required=True)
    s1.add_argument("--out", required=True)
    s1.add_argument("--stage1-steps", dest="stage1_steps", type=int)
    s1.add_argument("--lambda-temp", dest="lambda_temp", type=float)
    s1.add_argument("--lr", type=float)
    s1.set_defaults(func=cmd_train_stage1)

    s2 = sub.add_parser("train-stage2", help="pre-train the history prior, then the IR adapter")
    common(s2)
    s2.add_argument("--data", required=True)
    s2.add_argument("--stage1", required=True)
    s2.add_argument("--out", required=True)
    s2.add_argument("--prior-steps", dest="prior_steps", type=int)
    s2.add_argument("--stage2-steps", dest="stage2_steps", type=int)
    s2.add_argument("--lr", type=float)
    s2.set_defaults(func=cmd_train_stage2)

    f = sub.add_parser("fuse", help="fuse a sequence with the guided autoregressive sampler")
    common(f)
    f.add_argument("--ir", required=True, help="sequence manifest with ir frames")
    f.add_argument("--vi", help="sequence manifest with vi frames (default: the --ir manifest)")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--scale", type=float)
    f.add_argument("--steps", type=int)
    f.add_argument("--frames", type=int)
    f.add_argument("--ablate", action="append", choices=ABLATIONS)
    f.add_argument("--ablate-guidance", action="store_true", help="same as --ablate hg")
    f.add_argument("--diffmaps", action="store_true")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="recompute metrics of a fused run against its sources")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True, help="sequence manifest")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate runs into a comparison table")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (CliError, ConfigError, FormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"drfuse: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
