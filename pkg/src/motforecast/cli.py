"""Command-line entry point: simulate, track, train-forecaster, forecast-eval, evaluate, ablate.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments
from .association import outputs_to_frames, predictor_factory, run_sequence
from .forecaster import (ForecasterParams, desk_config, desk_train_config, samples_from_tracks, train,
                         write_training_log)
from .io import (ConfigError, MotFormatError, RunConfig, build_observations, group_by_id, load_config,
                 read_contexts, read_embeddings, read_mot, save_config, write_mot)
from .metrics import clear_mot, per_step_errors, write_report
from .simdata import SUITE_SEEDS, SceneSpec, generate, make_suite

log = logging.getLogger("motforecast")

OUT_ENV = "MOTFORECAST_OUT"
DEFAULT_OUT = "motforecast-out"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here that is a validation error (1)
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _defaults_epilog() -> str:
    cfg = RunConfig()
    lines = ["configuration defaults (override any of them in --config FILE.json):"]
    for section in ("tracker", "forecaster", "kalman", "training"):
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"  {section}.{k} = {v!r}")
    lines.append(f"output directory: --out, else ${OUT_ENV}, else ./{DEFAULT_OUT}")
    return "\n".join(lines)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg: RunConfig) -> dict:
    if bool(args.suite) == bool(args.scene):
        raise UsageError("simulate needs exactly one of --suite or --scene")
    if args.suite:
        if args.suite not in SUITE_SEEDS:
            raise UsageError(f"unknown suite {args.suite!r}; available: {', '.join(sorted(SUITE_SEEDS))}")
        spec = make_suite(args.suite, seed=args.seed)
    else:
        spec = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    out = _out_dir(args)
    paths = generate(spec).write(out)
    return {"command": "simulate", "suite": spec.name, "files": {k: str(v) for k, v in sorted(paths.items())}}


def _load_params(path):
    if path is None:
        return None
    return ForecasterParams.load(path)


def cmd_track(args, cfg: RunConfig) -> dict:
    kind = args.predictor or cfg.tracker.predictor
    if kind == "learned" and not args.params:
        raise UsageError("--predictor learned requires --params CHECKPOINT")
    tcfg = dataclasses.replace(cfg.tracker, predictor=kind,
                               use_fusion=cfg.tracker.use_fusion and not args.no_fusion,
                               use_iou=cfg.tracker.use_iou and not args.no_iou,
                               use_occlusion=cfg.tracker.use_occlusion and not args.no_occlusion)
    problems = tcfg.violations()
    if problems:
        raise ConfigError(problems)
    params = _load_params(args.params) if kind == "learned" else None
    dets = read_mot(args.det)
    emb_dim, embs = read_embeddings(args.emb) if args.emb else (0, None)
    contexts = read_contexts(args.ctx) if args.ctx else None
    if contexts and params is not None:
        width = params.config.embed_dim
        if any(len(c) != width for c in contexts.values()):
            raise UsageError(f"context width does not match the checkpoint's embed_dim={width}")
    observations = build_observations(dets, embs, emb_dim, contexts if kind == "learned" else None)
    outputs, tracker = run_sequence(observations, tcfg, predictor_factory(kind, params, cfg.kalman))
    out = _out_dir(args)
    write_mot([o.record() for o in outputs], out / "results.txt", extended=args.extended)
    stats = tracker.stats.as_dict()
    stats.update(predictor=kind, output_rows=len(outputs),
                 forecasted_rows=sum(o.flag == "forecasted" for o in outputs),
                 active_tracks=len(tracker.tracks))
    (out / "track_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    result = {"command": "track", "results": str(out / "results.txt"), **stats}
    if args.gt:
        report = clear_mot(read_mot(args.gt), outputs_to_frames(outputs))
        write_report(report, out / "tracking_report.json", out / "tracking_report.csv", Path(args.det).stem)
        result["report"] = report.as_dict()
    return result


def cmd_train(args, cfg: RunConfig) -> dict:
    if args.preset == "desk":
        fcfg = desk_config(p=cfg.forecaster.p, q=cfg.forecaster.q, concat_mode=cfg.forecaster.concat_mode)
        tset = desk_train_config(seed=cfg.training.seed, clip_norm=cfg.training.clip_norm)
    else:
        fcfg, tset = cfg.forecaster, cfg.training
    if args.epochs is not None:
        tset = dataclasses.replace(tset, epochs=args.epochs)
    if args.seed is not None:
        tset = dataclasses.replace(tset, seed=args.seed)
    ctx_files = args.ctx or []
    if ctx_files and len(ctx_files) != len(args.gt):
        raise UsageError("give one --ctx file per --gt file, or none")
    samples = []
    for i, gt_path in enumerate(args.gt):
        tracks = {tid: [(f, tuple(b)) for f, b in rows] for tid, rows in group_by_id(read_mot(gt_path)).items()}
        contexts = read_contexts(ctx_files[i]) if ctx_files else None
        if contexts and any(len(c) != fcfg.embed_dim for c in contexts.values()):
            raise UsageError(f"{ctx_files[i]}: context width must equal forecaster.embed_dim={fcfg.embed_dim}")
        samples += samples_from_tracks(tracks, fcfg, contexts, stride=args.stride)
    if not samples:
        raise UsageError("no usable training windows: every track is shorter than 3 frames")
    params, history = train(samples, fcfg, tset)
    out = _out_dir(args)
    params.save(out / "forecaster.npz")
    write_training_log(history, out / "train_log.csv")
    return {"command": "train-forecaster", "checkpoint": str(out / "forecaster.npz"), "windows": len(samples),
            "epochs": len(history), "final_l_for": history[-1].l_for, "digest": params.digest()}


def cmd_forecast_eval(args, cfg: RunConfig) -> dict:
    kind = args.predictor or ("learned" if args.params else None)
    if kind is None:
        raise UsageError("forecast-eval needs --predictor or --params")
    if kind == "learned" and not args.params:
        raise UsageError("--predictor learned requires --params CHECKPOINT")
    params = _load_params(args.params) if kind == "learned" else None
    p = args.p or (params.config.p if params else cfg.forecaster.p)
    q = args.q or (params.config.q if params else cfg.forecaster.q)
    gt = read_mot(args.gt)
    contexts = read_contexts(args.ctx) if args.ctx else None
    report = experiments.score_forecasts(gt, kind, p, q, params, cfg.kalman, contexts, strict=not args.lenient)
    out = _out_dir(args)
    write_report(report, out / "forecast_report.json", out / "forecast_report.csv", kind)
    result = {"command": "forecast-eval", "predictor": kind, **report.as_dict()}
    if args.figures:
        from .plotting import horizon_error_figure
        curves = {}
        for name in dict.fromkeys(["cv", "kalman", kind]):
            predict, batch = experiments.forecast_fn(name, q, params, cfg.kalman, contexts)
            curves[name] = per_step_errors(gt, predict, p, q, batch_predict=batch)
        result["figure"] = str(horizon_error_figure(curves, out / "horizon_error.png"))
    return result


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    gt = read_mot(args.gt)
    res = read_mot(args.res)
    if gt and res:
        last = max(gt)
        outside = sorted(f for f in res if f > last)
        if outside:
            raise UsageError(f"frame misalignment: results contain frames {outside[0]}..{outside[-1]} "
                             f"beyond the last ground-truth frame {last}")
    report = clear_mot(gt, res, args.iou)
    out = _out_dir(args)
    write_report(report, out / "tracking_report.json", out / "tracking_report.csv", Path(args.res).stem)
    return {"command": "evaluate", **report.as_dict()}


def cmd_ablate(args, cfg: RunConfig) -> dict:
    suites = args.suites or list(SUITE_SEEDS)
    unknown = [s for s in suites if s not in SUITE_SEEDS]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; available: {', '.join(sorted(SUITE_SEEDS))}")
    scenes = {name: generate(make_suite(name)) for name in suites}
    kinds = ["cv", "kalman"] if args.skip_learned else ["cv", "kalman", "learned"]
    params = _load_params(args.params)
    out = _out_dir(args)
    if "learned" in kinds and params is None:
        fcfg = desk_config(p=cfg.forecaster.p, q=cfg.forecaster.q)
        tset = desk_train_config(seed=cfg.training.seed)
        params, history = experiments.train_on_siblings(suites, fcfg, tset, n_seeds=args.train_seeds)
        params.save(out / "forecaster.npz")
        write_training_log(history, out / "train_log.csv")
    grid_kind = args.predictor
    if grid_kind == "learned" and params is None:
        raise UsageError("--predictor learned needs --params or training (drop --skip-learned)")
    comp_rows, pred_rows = [], []
    for name, scene in scenes.items():
        log.info("ablating %s", name)
        comp_rows += experiments.component_grid(scene, cfg.tracker, grid_kind, params, cfg.kalman)
        pred_rows += experiments.predictor_grid(scene, cfg.tracker, cfg.forecaster.p, cfg.forecaster.q,
                                                params, cfg.kalman, kinds)
    md = [experiments.write_table(comp_rows, out / "components.md", out / "components.csv",
                                  f"association components (predictor {grid_kind})"),
          experiments.write_table(pred_rows, out / "predictors.md", out / "predictors.csv",
                                  f"motion predictors (p={cfg.forecaster.p}, q={cfg.forecaster.q})")]
    (out / "ablation.md").write_text("\n".join(md))
    result = {"command": "ablate", "suites": suites, "component_rows": len(comp_rows),
              "predictor_rows": len(pred_rows), "table": str(out / "ablation.md")}
    if args.figures:
        from .plotting import component_figure, horizon_error_figure
        result["figures"] = [str(component_figure(comp_rows, out / "components.png"))]
        ref = "nonlinear-clean" if "nonlinear-clean" in scenes else suites[0]
        curves = {}
        for kind in kinds:
            predict, batch = experiments.forecast_fn(kind, cfg.forecaster.q, params, cfg.kalman,
                                                     scenes[ref].contexts())
            curves[kind] = per_step_errors(scenes[ref].gt, predict, cfg.forecaster.p, cfg.forecaster.q,
                                           batch_predict=batch)
        result["figures"].append(str(horizon_error_figure(curves, out / "horizon_error.png")))
    return result


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; unspecified keys keep their defaults")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _defaults_epilog()

    parser = _Parser(prog="motforecast", description="Joint multi-object tracking and box forecasting.",
                     formatter_class=fmt, epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_,
                            formatter_class=fmt, epilog=epilog)
        sp.set_defaults(func=fn)
        return sp

    sp = add("simulate", cmd_simulate, "write a synthetic scene (gt.txt, det.txt, emb.csv, scene.json)")
    sp.add_argument("--suite", help=f"standard suite: {', '.join(SUITE_SEEDS)}")
    sp.add_argument("--scene", help="SceneSpec JSON file instead of a suite")
    sp.add_argument("--seed", type=int, help="override the seed (suites also re-draw their layout)")

    sp = add("track", cmd_track, "run the tracker over a detection file")
    sp.add_argument("--det", required=True, help="MOT-format detections")
    sp.add_argument("--emb", help="appearance embeddings CSV (frame,det_index,e0..)")
    sp.add_argument("--ctx", help="per-frame context CSV for the learned predictor")
    sp.add_argument("--params", help="forecaster checkpoint (.npz); required for --predictor learned")
    sp.add_argument("--predictor", choices=["cv", "kalman", "learned"],
                    help="motion predictor (default: tracker.predictor from the config)")
    sp.add_argument("--gt", help="optional ground truth; also writes a tracking report")
    sp.add_argument("--no-fusion", action="store_true", help="disable the appearance + forecast stage")
    sp.add_argument("--no-iou", action="store_true", help="disable the IOU stage")
    sp.add_argument("--no-occlusion", action="store_true", help="disable forecasting through occlusion")
    sp.add_argument("--extended", action="store_true", help="append a detected/forecasted column")

    sp = add("train-forecaster", cmd_train, "train the forecaster on ground-truth tracks")
    sp.add_argument("--gt", nargs="+", required=True, help="one or more MOT-format ground-truth files")
    sp.add_argument("--ctx", nargs="*", help="context CSV per gt file (same order)")
    sp.add_argument("--preset", choices=["config", "desk"], default="config",
                    help="'desk' swaps in small widths and a fast schedule (default: config)")
    sp.add_argument("--epochs", type=int, help="override training.epochs")
    sp.add_argument("--seed", type=int, help="override training.seed")
    sp.add_argument("--stride", type=int, default=1, help="anchor stride for sliding windows (default: 1)")

    sp = add("forecast-eval", cmd_forecast_eval, "score forecasts over every ground-truth anchor")
    sp.add_argument("--gt", required=True, help="MOT-format ground truth")
    sp.add_argument("--params", help="forecaster checkpoint; implies --predictor learned")
    sp.add_argument("--predictor", choices=["cv", "kalman", "learned"])
    sp.add_argument("--ctx", help="per-frame context CSV")
    sp.add_argument("--p", type=int, help="past window (default: forecaster.p)")
    sp.add_argument("--q", type=int, help="horizon (default: forecaster.q)")
    sp.add_argument("--lenient", action="store_true", help="also score anchors with a truncated future")
    sp.add_argument("--figures", action="store_true", help="also save a per-step error plot")

    sp = add("evaluate", cmd_evaluate, "CLEAR MOT and IDF1 of a result file")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--res", required=True)
    sp.add_argument("--iou", type=float, default=0.5, help="match threshold (default: 0.5)")

    sp = add("ablate", cmd_ablate, "association-stage and predictor ablations on the standard suites")
    sp.add_argument("--suites", nargs="+", help="subset of standard suites (default: all)")
    sp.add_argument("--predictor", choices=["cv", "kalman", "learned"], default="kalman",
                    help="predictor behind the stage grid (default: kalman)")
    sp.add_argument("--params", help="forecaster checkpoint; skips training")
    sp.add_argument("--train-seeds", type=int, default=3,
                    help="re-seeded copies per suite used for training (default: 3)")
    sp.add_argument("--skip-learned", action="store_true", help="only the cv and kalman rows")
    sp.add_argument("--figures", action="store_true", help="also save bar and error-curve plots")
    return parser


def _fail(code: int, kind: str, message: str, details=None) -> int:
    doc = {"error": kind, "message": message}
    if details:
        doc["details"] = details
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        result = args.func(args, cfg)
        if args.command != "simulate":  # scene.json already records a simulation
            save_config(cfg, _out_dir(args) / "config.json")
    except ConfigError as exc:
        return _fail(1, "config", "invalid configuration", exc.problems)
    except UsageError as exc:
        return _fail(1, "usage", str(exc))
    except MotFormatError as exc:
        return _fail(1, "format", str(exc))
    except (FileNotFoundError, IsADirectoryError) as exc:
        return _fail(1, "input", str(exc))
    except (ValueError, KeyError) as exc:
        return _fail(1, "invalid", str(exc))
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        return _fail(2, "runtime", f"{type(exc).__name__}: {exc}")
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
