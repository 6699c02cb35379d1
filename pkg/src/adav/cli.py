"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 input-format error,
4 contract violation (for example a clip too short to warm up the queue).
"""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import evaluation as ev
from . import io as aio
from . import pipeline as pl
from . import scenes, threat
from .defense import ContractError, DefenseConfig, run_stream

log = logging.getLogger("adav")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_CONTRACT = 0, 2, 3, 4
TUNE_COLUMNS = ["k", "lambda", "adv_map", "clean_map", "objective"]


def threads() -> int:
    raw = os.environ.get("ADAV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise pl.ConfigError(f"ADAV_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise pl.ConfigError(f"ADAV_THREADS must be a positive integer, got {raw!r}")
    return n


def csv_text(columns, rows) -> str:
    buf = _stdio.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: repr(v) if isinstance(v, float) else v for c, v in r.items()})
    return buf.getvalue()


class Outputs:
    """Tracks files written by a subcommand so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def write(self, path, data) -> Path:
        path = Path(path)
        aio.atomic_write(path, data)
        self.paths.append(path)
        return path

    def remove(self) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)


# ---------------------------------------------------------------- config

def load_config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    over = {}
    for flag, name in (("seed", "seed"), ("duration", "duration"), ("fps", "fps")):
        if getattr(args, flag, None) is not None:
            over[name] = getattr(args, flag)
    if getattr(args, "steps", None) is not None:
        over["patch_steps" if args.command == "train-patch" else "epochs"] = args.steps
    if getattr(args, "lr", None) is not None:
        over["patch_lr" if args.command == "train-patch" else "det_lr"] = args.lr
    try:
        cfg = replace(cfg, **over)
        d = {}
        if getattr(args, "k", None) is not None:
            d["k"] = args.k
        if getattr(args, "lam", None) is not None:
            d["lam"] = args.lam
        if d:
            cfg = replace(cfg, defense=replace(cfg.defense, **d))
    except ValueError as e:
        raise pl.ConfigError(str(e)) from e
    return cfg


def _path(args, name: str, cfg: pl.RunConfig) -> Path:
    val = getattr(args, name, None) or cfg.paths.get(name)
    if not val:
        raise pl.ConfigError(f"--{name} is required (or set paths.{name} in the config)")
    return Path(val)


def _clips(paths) -> list:
    return [aio.load_clip(p) for p in paths]


def _corpus(args, cfg, role):
    """Clips from --clean/--adv files, or generated from the config seed and --patch."""
    if args.clean or args.adv:
        if not (args.clean and args.adv):
            raise pl.ConfigError("--clean and --adv must be given together")
        clean, adv = _clips(args.clean), _clips(args.adv)
        if any(c.trajectory is None for c in adv):
            raise pl.ConfigError("every --adv clip needs a trajectory sidecar")
        return clean, adv
    patch = aio.load_patch(_path(args, "patch", cfg))
    return pl.build_corpus(cfg, role, patch)


# ---------------------------------------------------------------- subcommands

def cmd_train_detector(args, cfg, out: Outputs):
    w = pl.build_detector(cfg)
    out.write(_path(args, "out", cfg), aio.weights_bytes(w))


def cmd_train_patch(args, cfg, out: Outputs):
    w = aio.load_weights(_path(args, "weights", cfg))
    p = pl.build_patch(cfg, w)
    out.write(_path(args, "out", cfg), aio.patch_bytes(p))


def cmd_gen_clean(args, cfg, out: Outputs):
    clip = scenes.gen_clean_clip(cfg.seed, cfg.duration, cfg.fps)
    dest = _path(args, "out", cfg)
    lab, _ = aio.sidecars(dest)
    out.write(dest, aio.clip_bytes(clip))
    out.write(lab, aio.labels_json(clip))


def cmd_gen_adv(args, cfg, out: Outputs):
    clean = aio.load_clip(_path(args, "clip", cfg))
    patch = aio.load_patch(_path(args, "patch", cfg))
    if clean.trajectory is not None:
        raise pl.ConfigError("--clip is already an adversarial clip")
    try:
        adv = threat.make_adversarial_clip(clean, patch, cfg.seed)
    except ValueError as e:
        raise ContractError(str(e)) from e
    dest = _path(args, "out", cfg)
    lab, traj = aio.sidecars(dest)
    out.write(dest, aio.clip_bytes(adv))
    out.write(lab, aio.labels_json(adv))
    out.write(traj, json.dumps(adv.trajectory.to_dict(), sort_keys=True))


def cmd_defend(args, cfg, out: Outputs):
    w = aio.load_weights(_path(args, "weights", cfg))
    clip = aio.load_clip(_path(args, "clip", cfg))
    res = run_stream(w, clip.frames, clip.fps, cfg.defense)
    lines = [r.to_json() for r in res.reports]
    if args.out:
        out.write(args.out, "\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    flagged = sum(r.flagged for r in res.reports)
    log.info("%d of %d frames flagged", flagged, len(res.reports))


def cmd_tune(args, cfg, out: Outputs):
    w = aio.load_weights(_path(args, "weights", cfg))
    clean, adv = _corpus(args, cfg, "tune")
    cc, ca = ev.first_outputs(w, clean), ev.first_outputs(w, adv)
    k_grid = pl.k_grid_for(cfg, clean, adv, cc, ca)
    res = ev.tune(w, clean, adv, k_grid, cfg.lambda_grid, cfg.defense,
                  progress=lambda p: log.info("k=%.5g lambda=%.3g adv=%.4f clean=%.4f",
                                              p.k, p.lam, p.adv_map, p.clean_map),
                  clean_cache=cc, adv_cache=ca, workers=threads())
    rows = [{"k": p.k, "lambda": p.lam, "adv_map": p.adv_map, "clean_map": p.clean_map,
             "objective": res.objective(p)} for p in res.grid]
    dest = Path(args.out or cfg.paths.get("out") or ".")
    out.write(dest / "tune.csv", csv_text(TUNE_COLUMNS, rows))
    best = json.loads(replace(cfg.defense, k=res.k, lam=res.lam).to_json())
    out.write(dest / "tuned_defense.json", json.dumps(best, indent=2) + "\n")
    print(f"k={res.k!r} lambda={res.lam!r}")


def cmd_eval(args, cfg, out: Outputs):
    w = aio.load_weights(_path(args, "weights", cfg))
    clean, adv = _corpus(args, cfg, "eval")
    s = pl.evaluate(w, clean, adv, cfg.defense)
    dest = Path(args.out or cfg.paths.get("out") or ".")
    out.write(dest / "eval_clips.csv", csv_text(pl.EVAL_COLUMNS, s.rows))
    summary = {"defense": json.loads(cfg.defense.to_json()), **s.to_dict()}
    out.write(dest / "eval.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"adv mAP {s.undefended_adv_map:.4f} -> {s.defended_adv_map:.4f}, "
          f"clean mAP {s.undefended_clean_map:.4f} -> {s.defended_clean_map:.4f}, AUC {s.mse_auc:.4f}")


def cmd_bench(args, cfg, out: Outputs):
    w = aio.load_weights(_path(args, "weights", cfg))
    clean, adv = _corpus(args, cfg, "eval")
    b = ev.bench(w, clean, adv, cfg.defense)
    doc = asdict(b)
    dest = Path(args.out or cfg.paths.get("out") or ".")
    out.write(dest / "bench.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"clean {b.clean_fps:.1f} FPS, adversarial {b.adversarial_fps:.1f} FPS")


def scatter_svg(points, width: int = 420, height: int = 420, pad: int = 50) -> str:
    """Adversarial vs clean mAP per grid point as a standalone SVG."""
    xs = [p["clean_map"] for p in points]
    ys = [p["adv_map"] for p in points]
    lo_x, hi_x = min(xs + [0.0]), max(xs + [1.0])
    lo_y, hi_y = min(ys + [0.0]), max(ys + [1.0])

    def sx(v):
        return pad + (v - lo_x) / ((hi_x - lo_x) or 1.0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - lo_y) / ((hi_y - lo_y) or 1.0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">clean mAP</text>',
             f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {height / 2})">adversarial mAP</text>']
    for v in (lo_x, hi_x):
        parts.append(f'<text x="{sx(v):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{v:.2f}</text>')
    for v in (lo_y, hi_y):
        parts.append(f'<text x="{pad - 4}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.2f}</text>')
    best = min(points, key=lambda p: (p["objective"], p["k"], p["lambda"])) if points else None
    for p in points:
        fill = "crimson" if p is best else "steelblue"
        parts.append(f'<circle cx="{sx(p["clean_map"]):.2f}" cy="{sy(p["adv_map"]):.2f}" r="3.5" '
                     f'fill="{fill}"><title>k={p["k"]:.4g} lambda={p["lambda"]:.3g}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_tune_csv(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from e
    rows = list(csv.DictReader(_stdio.StringIO(text)))
    if not rows or set(rows[0]) != set(TUNE_COLUMNS):
        raise aio.FormatError(f"{path}: expected tune CSV with columns {TUNE_COLUMNS}")
    try:
        return [{k: float(v) for k, v in r.items()} for r in rows]
    except ValueError as e:
        raise aio.FormatError(f"{path}: {e}") from e


def cmd_report(args, cfg, out: Outputs):
    if not args.tune and not args.eval:
        raise pl.ConfigError("report needs --tune and/or --eval")
    dest = Path(args.out or cfg.paths.get("out") or ".")
    summary = {}
    if args.tune:
        pts = read_tune_csv(args.tune)
        best = min(pts, key=lambda p: (p["objective"], p["k"], p["lambda"]))
        summary["tune"] = {"points": len(pts), "best": best,
                           "max_adv_map": max(p["adv_map"] for p in pts),
                           "max_clean_map": max(p["clean_map"] for p in pts)}
        out.write(dest / "tune_scatter.svg", scatter_svg(pts))
    if args.eval:
        try:
            summary["eval"] = json.loads(Path(args.eval).read_text())
        except OSError as e:
            raise FileNotFoundError(f"cannot read {args.eval}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise aio.FormatError(f"{args.eval}: {e}") from e
    out.write(dest / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adav", description="Temporal-consistency defense against adversarial patches.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *flags):
        sp = sub.add_parser(name, parents=[common], help=help_)
        for f in flags:
            f(sp)
        sp.set_defaults(fn=fn)
        return sp

    def weights(sp):
        sp.add_argument("--weights", help="detector weights file")

    def patch(sp):
        sp.add_argument("--patch", help="patch file")

    def clip(sp):
        sp.add_argument("--clip", help="clip file")

    def scene(sp):
        sp.add_argument("--duration", type=float)
        sp.add_argument("--fps", type=float)

    def train(sp):
        sp.add_argument("--steps", type=int, help="epochs (train-detector) or optimizer steps (train-patch)")
        sp.add_argument("--lr", type=float)

    def defense(sp):
        sp.add_argument("--k", type=float, help="MSE threshold")
        sp.add_argument("--lambda", dest="lam", type=float, help="IQR multiplier")

    def corpus(sp):
        sp.add_argument("--clean", nargs="+", help="clean clip files")
        sp.add_argument("--adv", nargs="+", help="adversarial clip files")

    add("train-detector", cmd_train_detector, "train the toy detector", train, scene)
    add("train-patch", cmd_train_patch, "train a vanishing patch", weights, train, scene)
    add("gen-clean", cmd_gen_clean, "render a clean clip", scene)
    add("gen-adv", cmd_gen_adv, "insert a patch into a clean clip", clip, patch)
    add("defend", cmd_defend, "run the defense on a clip, one JSON report per frame", weights, clip, defense)
    add("tune", cmd_tune, "grid search over (k, lambda)", weights, patch, corpus, defense, scene)
    add("eval", cmd_eval, "evaluate a defense configuration", weights, patch, corpus, defense, scene)
    add("bench", cmd_bench, "measure defended throughput", weights, patch, corpus, defense, scene)
    rp = add("report", cmd_report, "summarise tune/eval outputs and plot the grid")
    rp.add_argument("--tune", help="tune.csv")
    rp.add_argument("--eval", help="eval.json")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        cfg = load_config(args)
        threads()
        args.fn(args, cfg, out)
    except pl.ConfigError as e:
        out.remove()
        print(f"adav: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (aio.FormatError, FileNotFoundError) as e:
        out.remove()
        print(f"adav: input error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ContractError as e:
        out.remove()
        print(f"adav: contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except BaseException:
        out.remove()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
