"""Command-line entry point wiring every module into reproducible runs.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad layouts,
bad records, failed checks), 3 runtime failure. Errors also emit one
machine-readable JSON object on stderr:

    {"error": {"code": "...", "message": "...", "offset": ...}}

Flags that mirror a config-file key say so in their help text as
`[config: <key>]`; `--set key=value` overrides any other key.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import curation, lora
from .config import RunConfig, apply_overrides, load_config, write_resolved
from .layout import (LayoutParseError, Layout, layout_from_json, layout_to_json,
                     layout_to_record, layout_validity_score, parse_layout_text,
                     serialize_layout)
from .rng import resolve_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

# flag -> config key map; the docs test checks each appears in --help
FLAG_CONFIG = {
    "--seed": "seed",
    "--steps": "steps",
    "--tau": "tau",
    "--cfg-scale": "cfg_scale",
    "--strategy": "strategy",
    "--rank": "rank",
    "--threshold": "threshold",
    "--lambda-a": "lambda_a",
    "--lambda-o": "lambda_o",
    "--batch": "batch",
    "--train-steps": "train_steps",
    "--lr": "lr",
    "--workers": "workers",
    "--canvas": "canvas",
    "--n-max": "n_max",
}


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_VALIDATION,
                 offset: int | None = None):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code
        self.offset = offset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, exit_code=EXIT_USAGE)


def _emit_error(err: CliError) -> None:
    payload = {"error": {"code": err.code, "message": str(err)}}
    if err.offset is not None:
        payload["error"]["offset"] = err.offset
    print(json.dumps(payload), file=sys.stderr)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    seed_specified = False
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        seed_specified = any(line.split("=")[0].strip() == "seed"
                             for line in text.splitlines() if "=" in line)
        cfg = load_config(args.config, base=cfg)
    overrides = []
    for flag_attr, key in (
        ("seed", "seed"), ("steps", "steps"), ("tau", "tau"),
        ("cfg_scale", "cfg_scale"), ("strategy", "strategy"), ("rank", "rank"),
        ("threshold", "threshold"), ("lambda_a", "lambda_a"), ("lambda_o", "lambda_o"),
        ("batch", "batch"), ("train_steps", "train_steps"), ("lr", "lr"),
        ("workers", "workers"), ("canvas", "canvas"), ("n_max", "n_max"),
    ):
        v = getattr(args, flag_attr, None)
        if v is not None:
            overrides.append(f"{key}={v}")
            seed_specified = seed_specified or key == "seed"
    for pair in getattr(args, "set", None) or []:
        overrides.append(pair)
        seed_specified = seed_specified or pair.split("=")[0].strip() == "seed"
    cfg = apply_overrides(cfg, overrides)
    if not seed_specified:
        # fall back to MIGKIT_SEED, then the config default
        cfg = apply_overrides(cfg, [f"seed={resolve_seed(None) or cfg.seed}"])
    return cfg


def _read_layouts_file(path: Path, n_max: int) -> list[Layout]:
    text = path.read_text()
    layouts = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            if line.lstrip().startswith("{"):
                layouts.append(layout_from_json(line, n_max=n_max))
            else:
                layouts.append(parse_layout_text(line, n_max=n_max))
        except LayoutParseError as exc:
            raise CliError(exc.code, f"line {ln}: {exc.reason}", offset=exc.offset)
        except ValueError as exc:
            raise CliError("E_BBOX", f"line {ln}: {exc}")
    if not layouts:
        raise CliError("E_EMPTY_LAYOUT", f"{path}: no layouts found")
    return layouts


# --- subcommand bodies -------------------------------------------------------

def cmd_parse(args) -> int:
    src = Path(args.infile).read_text()
    try:
        if args.to_dsl:
            layout = layout_from_json(src, n_max=args.n_max or 10)
            out_text = serialize_layout(layout) + "\n"
        else:
            layout = parse_layout_text(src.strip(), n_max=args.n_max or 10)
            out_text = layout_to_json(layout) + "\n"
    except LayoutParseError as exc:
        raise CliError(exc.code, exc.reason, offset=exc.offset)
    except ValueError as exc:
        raise CliError("E_BBOX", str(exc))
    Path(args.out).write_text(out_text)
    report = {
        "instances": layout.active_count,
        "validity_score": layout_validity_score(layout),
        "out": str(args.out),
    }
    print(json.dumps(report))
    return EXIT_OK


def _score_line(payload: tuple[str, float, float, float, bool]) -> str:
    line, la, lo, thr, pcn = payload
    try:
        rec = curation.record_from_dict(json.loads(line))
        rep = curation.score_record(rec, lambda_a=la, lambda_o=lo,
                                    threshold=thr, pair_count_norm=pcn)
        return json.dumps(rep.to_dict())
    except (ValueError, KeyError, TypeError) as exc:
        return json.dumps({"error": "malformed", "message": str(exc)})


def cmd_score(args) -> int:
    cfg = _load_run_config(args)
    lines = [ln for ln in Path(args.infile).read_text().splitlines() if ln.strip()]
    payloads = [(ln, cfg.lambda_a, cfg.lambda_o, cfg.threshold, cfg.pair_count_norm)
                for ln in lines]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_score_line, payloads, chunksize=64))
    else:
        results = [_score_line(p) for p in payloads]
    out = Path(args.out)
    out.write_text("\n".join(results) + "\n")
    print(json.dumps({"scored": len(results), "out": str(out)}))
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _load_run_config(args)
    kept_path, rej_path = Path(args.kept), Path(args.rejected)
    stats = curation.FilterStats()
    with open(args.infile) as src, open(kept_path, "w") as kf, open(rej_path, "w") as rf:
        for verdict, line, _rep in curation.filter_stream(
                src, threshold=cfg.threshold, lambda_a=cfg.lambda_a,
                lambda_o=cfg.lambda_o, pair_count_norm=cfg.pair_count_norm,
                stats=stats):
            (kf if verdict == "kept" else rf).write(line + "\n")
    stats_doc = stats.to_dict()
    stats_doc["parameters"] = {"threshold": cfg.threshold, "lambda_a": cfg.lambda_a,
                               "lambda_o": cfg.lambda_o,
                               "pair_count_norm": cfg.pair_count_norm}
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats_doc, indent=2) + "\n")
    print(json.dumps(stats_doc))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .pipeline import gen_dataset_cmd
    cfg = _load_run_config(args)
    gen_dataset_cmd(cfg, args.n, args.out, cfg.seed)
    write_resolved(cfg, args.out)
    print(json.dumps({"generated": args.n, "out": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train_loop
    cfg = _load_run_config(args)
    write_resolved(cfg, args.out)
    result = train_loop(cfg, args.data, args.out, quiet=args.quiet)
    print(json.dumps({"steps": result.steps, "final_loss": result.final_loss,
                      "checkpoint": str(result.checkpoint)}))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .imageio import write_png
    from .pipeline import load_model, make_sampler, scene_spec_from_config
    from .synth import upsample_nearest
    cfg = _load_run_config(args)
    layouts = _read_layouts_file(Path(args.layouts), cfg.n_max)
    model, _ = load_model(cfg, args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    sampler = make_sampler(model, cfg)
    spec = scene_spec_from_config(cfg)
    for lo in range(0, len(layouts), cfg.batch):
        chunk = layouts[lo:lo + cfg.batch]
        imgs = sampler(chunk)
        for i, (lay, img) in enumerate(zip(chunk, imgs)):
            k = lo + i
            write_png(out / f"sample_{k:05d}.png", upsample_nearest(img, spec.canvas))
            (out / f"sample_{k:05d}.json").write_text(
                json.dumps(layout_to_record(lay)) + "\n")
    print(json.dumps({"sampled": len(layouts), "out": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import contact_sheet, layout_adherence, render_layout_overlay
    from .imageio import write_png
    from .pipeline import load_model, make_sampler, scene_spec_from_config
    from .synth import upsample_nearest
    cfg = _load_run_config(args)
    layouts = _read_layouts_file(Path(args.layouts), cfg.n_max)
    model, _ = load_model(cfg, args.ckpt)
    spec = scene_spec_from_config(cfg)
    sampler = make_sampler(model, cfg, tau=args.eval_tau)
    report = layout_adherence(sampler, layouts, spec, batch=cfg.batch)
    out_path = Path(args.out)
    out_path.write_text(report.to_json() + "\n")
    write_resolved(cfg, out_path.parent if out_path.parent != Path("") else Path("."))
    if args.contact_sheet:
        n = min(len(layouts), 16)
        imgs = sampler(layouts[:n])
        pairs = [(render_layout_overlay(lay, spec), upsample_nearest(img, spec.canvas))
                 for lay, img in zip(layouts[:n], imgs)]
        write_png(args.contact_sheet, contact_sheet(pairs))
    print(json.dumps({"mean_iou": report.mean_iou,
                      "success_at_0.5": report.success_at_05,
                      "out": str(args.out)}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_gradient_suite
    results = run_gradient_suite(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err, tol in results:
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<28} rel_err {err:12.3e}  tol {tol:g}  {status}")
        worst = max(worst, err / tol)
    if worst >= 1.0:
        raise CliError("E_GRADCHECK", "finite-difference check failed")
    print(json.dumps({"checks": len(results), "all_passed": True}))
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .pipeline import build_backbone
    cfg = _load_run_config(args)
    ranks = [int(r) for r in args.ranks.split(",")] if args.ranks else [cfg.rank]
    rows = []
    for r in ranks:
        c = apply_overrides(cfg, [f"rank={r}"])
        model, registry = build_backbone(c)
        base, adapter, ratio = lora.param_count(model)
        rows.append({"rank": r, "base": base, "adapter": adapter,
                     "ratio": ratio, "layers": len(registry)})
    print(f"{'rank':>6} {'base':>10} {'adapter':>10} {'ratio':>8} {'layers':>7}")
    for row in rows:
        print(f"{row['rank']:>6} {row['base']:>10} {row['adapter']:>10} "
              f"{row['ratio']:>8.4f} {row['layers']:>7}")
    print(json.dumps(rows))
    return EXIT_OK


# --- argument wiring ---------------------------------------------------------

def _add_config_flags(p: _Parser, *names: str) -> None:
    spec = {
        "seed": ("--seed", int, "random seed [config: seed]"),
        "steps": ("--steps", int, "sampling steps [config: steps]"),
        "tau": ("--tau", float, "guidance cutoff fraction [config: tau]"),
        "cfg_scale": ("--cfg-scale", float, "classifier-free guidance scale [config: cfg_scale]"),
        "strategy": ("--strategy", str, "fusion strategy sum|avg|mask [config: strategy]"),
        "rank": ("--rank", int, "adapter rank [config: rank]"),
        "threshold": ("--threshold", float, "quality score threshold [config: threshold]"),
        "lambda_a": ("--lambda-a", float, "area penalty weight [config: lambda_a]"),
        "lambda_o": ("--lambda-o", float, "overlap penalty weight [config: lambda_o]"),
        "batch": ("--batch", int, "batch size [config: batch]"),
        "train_steps": ("--train-steps", int, "optimizer steps [config: train_steps]"),
        "lr": ("--lr", float, "learning rate [config: lr]"),
        "workers": ("--workers", int, "parallel workers [config: workers]"),
        "canvas": ("--canvas", int, "scene canvas size [config: canvas]"),
        "n_max": ("--n-max", int, "instance slot count [config: n_max]"),
    }
    for name in names:
        flag, typ, help_text = spec[name]
        p.add_argument(flag, dest=name, type=typ, default=None, help=help_text)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def build_parser() -> _Parser:
    root = _Parser(prog="migkit",
                   description="Multi-instance layout-to-image kit (desk scale).")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="convert layout DSL <-> JSON with validity report")
    p.add_argument("--in", dest="infile", required=True, help="input file")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--to-dsl", action="store_true", help="convert JSON record to DSL text")
    p.add_argument("--n-max", dest="n_max", type=int, default=None,
                   help="instance slot count [config: n_max]")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("score", help="score annotation records (JSON lines)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="per-record score reports (JSON lines)")
    _add_config_flags(p, "threshold", "lambda_a", "lambda_o", "workers")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("filter", help="partition records by quality score")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--kept", required=True)
    p.add_argument("--rejected", required=True)
    p.add_argument("--stats", default=None, help="stats JSON path")
    _add_config_flags(p, "threshold", "lambda_a", "lambda_o")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    _add_config_flags(p, "seed", "canvas", "n_max")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters + layout branch on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p, "seed", "rank", "batch", "train_steps", "lr", "strategy")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample images for layouts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layouts", required=True, help="JSONL records or DSL lines")
    p.add_argument("--out", required=True)
    _add_config_flags(p, "seed", "steps", "tau", "cfg_scale", "strategy", "batch")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="layout adherence vs the detector oracle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layouts", required=True)
    p.add_argument("--out", required=True, help="EvalReport JSON path")
    p.add_argument("--contact-sheet", default=None, help="optional montage PNG")
    p.add_argument("--eval-tau", type=float, default=None,
                   help="override tau for this evaluation only [config: tau]")
    _add_config_flags(p, "seed", "steps", "tau", "cfg_scale", "strategy", "batch")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seed", dest="seed", type=int, default=None,
                   help="random seed [config: seed]")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("param-count", help="base/adapter parameter table per rank")
    p.add_argument("--ranks", default=None, help="comma list, e.g. 8,64,128,256")
    _add_config_flags(p, "rank")
    p.set_defaults(fn=cmd_param_count)

    return root


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as err:
        _emit_error(err)
        return err.exit_code
    except (ValueError, KeyError) as exc:
        _emit_error(CliError("E_VALIDATION", str(exc)))
        return EXIT_VALIDATION
    except OSError as exc:
        _emit_error(CliError("E_RUNTIME", str(exc), exit_code=EXIT_RUNTIME))
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        _emit_error(CliError("E_RUNTIME", f"{type(exc).__name__}: {exc}",
                             exit_code=EXIT_RUNTIME))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
