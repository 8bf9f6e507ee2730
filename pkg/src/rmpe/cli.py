"""Command-line entry point: ``rmpe <command> [<subcommand>] [options]``.

Errors are reported as one JSON object on stderr
(``{"error": <code>, "exit_code": <n>, "message": ...}``) with a nonzero
exit status; see ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import io
from .affine import SingularMapError, gradcheck
from .core import PoseProposal, RMPEError, pose_score
from .evaluation import EvalConfig, UnknownImageError, evaluate
from .nms import MixedImagesError, run_nms_batch
from .optim import EmptyValidationError, OptimConfig, optimize_params
from .pgpg import (DegeneratePoseError, InsufficientDataError, RejectionBudgetError,
                   fit_model, sample_proposals)
from .pipeline import PipelineConfig, report_text, run_pipeline
from .synth import generate

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "format": 3,        # malformed file, schema or version mismatch
    "invalid_value": 4,  # well-formed input violating a value constraint
    "numerical": 5,     # singular map, failed gradient check
    "data": 6,          # not enough / inconsistent data for the operation
    "io": 7,            # missing file, unwritable path
}


class CheckFailed(RMPEError):
    code = "check_failed"


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, io.FormatError):
        return EXIT_CODES["format"]
    if isinstance(exc, (SingularMapError, CheckFailed)):
        return EXIT_CODES["numerical"]
    if isinstance(exc, (InsufficientDataError, RejectionBudgetError, UnknownImageError,
                        EmptyValidationError, DegeneratePoseError, MixedImagesError)):
        return EXIT_CODES["data"]
    if isinstance(exc, OSError):
        return EXIT_CODES["io"]
    if isinstance(exc, ValueError):
        return EXIT_CODES["invalid_value"]
    return EXIT_CODES["internal"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", EXIT_CODES["usage"], message)
        raise SystemExit(EXIT_CODES["usage"])


def _emit_error(code: str, exit_code: int, message: str):
    sys.stderr.write(json.dumps({"error": code, "exit_code": exit_code, "message": message}) + "\n")


def _out(args, payload: dict, text: str | None = None):
    if args.json or text is None:
        sys.stdout.write(json.dumps(payload, allow_nan=False) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


# -- commands ---------------------------------------------------------------

def cmd_sdtn_gradcheck(args):
    err = gradcheck(args.trials, args.h, args.seed)
    ok = err <= args.tol
    _out(args, {"max_rel_error": err, "tol": args.tol, "trials": args.trials, "pass": ok},
         f"max relative error {err:.3e} (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CheckFailed(f"gradient check failed: {err:.3e} > {args.tol:g}")


def cmd_synth_gen(args):
    path = io.config_path(args.config)
    if path is None:
        raise ValueError("--config (or $RMPE_CONFIG) is required")
    cfg = io.load_synth_config(path, args.strict)
    if args.seed is not None:
        cfg.seed = args.seed
    gts, props = generate(cfg)
    io.save_annotations(args.out_gt, gts)
    io.save_proposals(args.out_props, props)
    _out(args, {"images": len(gts), "people": sum(len(a.people) for a in gts),
                "proposals": len(props), "gt": args.out_gt, "proposals_file": args.out_props})


def cmd_pgpg_fit(args):
    gts = io.load_annotations(args.gt, args.strict)
    dets = io.load_proposals(args.detections, args.strict)
    model = fit_model(gts, dets, k=args.k, components=args.components, seed=args.seed,
                      min_samples=args.min_samples)
    io.save_model(args.out, model)
    _out(args, {"k": model.k, "cluster_sizes": model.cluster_sizes,
                "fallback_clusters": [i for i, d in enumerate(model.degenerate) if d],
                "out": args.out})


def cmd_pgpg_sample(args):
    model = io.load_model(args.model, args.strict)
    gts = io.load_annotations(args.gt, args.strict)
    props = []
    person = 0
    for ann in gts:
        for gt in ann.people:
            boxes = sample_proposals(gt.pose, gt.box, model, args.n, seed=[args.seed, person],
                                     iou_floor=args.iou_floor)
            pose = gt.pose.with_score(pose_score(1.0, gt.pose))
            props.extend(PoseProposal(ann.image_id, b, pose) for b in boxes)
            person += 1
    io.save_proposals(args.out, props)
    _out(args, {"people": person, "proposals": len(props), "out": args.out})


def cmd_nms_run(args):
    props = io.load_proposals(args.proposals, args.strict)
    params = io.load_params(args.params, args.strict)
    kept = run_nms_batch(props, params, args.threads)
    io.save_proposals(args.out, kept)
    _out(args, {"input": len(props), "kept": len(kept), "out": args.out})


def cmd_nms_optimize(args):
    props = io.load_proposals(args.proposals, args.strict)
    gts = io.load_annotations(args.gt, args.strict)
    path = io.config_path(args.config)
    cfg = io.load_optim_config(path, args.strict) if path else OptimConfig()
    cfg.threads = args.threads
    res = optimize_params(props, gts, cfg)
    io.save_params(args.out, res.params)
    trace_path = str(Path(args.out).with_suffix("")) + ".trace.json"
    io.write_text(trace_path, io.dumps(io.optim_result_to_doc(res)))
    _out(args, {"params": res.params.to_dict(), "best_map": res.best_map, "trace": res.trace,
                "out": args.out, "trace_file": trace_path})


def cmd_eval(args):
    preds = io.load_proposals(args.pred, args.strict)
    gts = io.load_annotations(args.gt, args.strict)
    report = evaluate(preds, gts, EvalConfig(args.alpha))
    if args.out:
        io.save_report(args.out, report)
    doc = io.report_to_doc(report)["payload"]
    _out(args, doc, json.dumps(doc, allow_nan=False) + "\n" + report.table())


def cmd_pipeline(args):
    path = io.config_path(args.config)
    raw = io.read_json(path) if path else {}
    if "payload" in raw:
        _, raw = io.open_envelope(raw, "pipeline_config", args.strict)
    cfg = PipelineConfig.from_dict(raw, args.strict)
    if args.seed is not None:
        cfg.seed = args.seed
    text = report_text(run_pipeline(cfg))
    if args.out:
        io.write_text(args.out, text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--lenient", dest="strict", action="store_false",
                        help="warn about unknown fields instead of rejecting them")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="rmpe", description="Pose NMS, proposal generation and evaluation tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sdtn = sub.add_parser("sdtn").add_subparsers(dest="sub", required=True)
    g = sdtn.add_parser("gradcheck", parents=[common], help="finite-difference check of SDTN gradients")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_sdtn_gradcheck)

    synth = sub.add_parser("synth").add_subparsers(dest="sub", required=True)
    g = synth.add_parser("gen", parents=[common], help="generate synthetic annotations and proposals")
    g.add_argument("--config")
    g.add_argument("--out-gt", required=True)
    g.add_argument("--out-props", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_synth_gen)

    pg = sub.add_parser("pgpg").add_subparsers(dest="sub", required=True)
    g = pg.add_parser("fit", parents=[common], help="fit atomic poses and offset mixtures")
    g.add_argument("--gt", required=True)
    g.add_argument("--detections", required=True)
    g.add_argument("--k", type=int, default=15)
    g.add_argument("--components", type=int, default=3)
    g.add_argument("--min-samples", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pgpg_fit)
    g = pg.add_parser("sample", parents=[common], help="sample proposal boxes for annotated people")
    g.add_argument("--model", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--iou-floor", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pgpg_sample)

    nms = sub.add_parser("nms").add_subparsers(dest="sub", required=True)
    g = nms.add_parser("run", parents=[common], help="apply pose NMS")
    g.add_argument("--proposals", required=True)
    g.add_argument("--params", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: available cores)")
    g.set_defaults(func=cmd_nms_run)
    g = nms.add_parser("optimize", parents=[common], help="tune NMS parameters for validation mAP")
    g.add_argument("--proposals", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: available cores)")
    g.set_defaults(func=cmd_nms_optimize)

    g = sub.add_parser("eval", parents=[common], help="PCKh mAP of predictions")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--alpha", type=float, default=0.5)
    g.add_argument("--out")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("pipeline", parents=[common], help="synth -> pgpg -> optimize -> nms -> eval")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = _exit_code(exc)
        _emit_error(getattr(exc, "code", type(exc).__name__), code, str(exc))
        if args.verbose:
            logging.exception("command failed")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
