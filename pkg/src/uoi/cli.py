"""Command-line entry point: ``uoi postprocess | eval | simulate | sweep``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import sys
from typing import Sequence

from .evaluation import MetricReport, evaluate
from .grouping import POSTPROCESSORS, BoxKey, PostprocessConfig, ProposalRecord, SoftMode, postprocess
from .io import FormatError, format_detections, load_config, read_detections, read_ground_truth
from .simulator import (Pipeline, RegressorMode, SimConfig, SimConfigError, SweepAxis, run_experiment,
                        sweep, with_axis)

CSV_COLUMNS = ("map", "ap50", "ap75", "lrp", "lrp_loc", "lrp_fp", "lrp_fn", "loc_miou", "cls_acc")
NEEDS_PROPOSAL = ("uoi", "box-voting")


class CliError(Exception):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# reports

def render_report(report: MetricReport) -> str:
    """Aligned table followed by machine-readable ``key=value`` lines."""
    values = report.as_dict()
    width = max(len(k) for k in values)
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
    lines += [f"{k:<{width}}  {v:.4f}" for k, v in values.items()]
    lines.append("")
    lines += [f"{k}={_fmt(v)}" for k, v in values.items()]
    lines.append("flags=" + ",".join(report.flags))
    return "\n".join(lines) + "\n"


def zero_report(flag: str) -> MetricReport:
    return MetricReport(0.0, {0.5: 0.0, 0.75: 0.0}, {"S": 0.0, "M": 0.0, "L": 0.0},
                        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, (flag,))


# ---------------------------------------------------------------------------
# commands

def cmd_postprocess(args) -> str:
    dets = read_detections(args.input)
    has_proposals = [d.proposal is not None for d in dets]
    if args.method in NEEDS_PROPOSAL and not all(has_proposals):
        line = has_proposals.index(False) + 1
        raise CliError(f"method {args.method} needs a proposal field on every record "
                       f"(record {line} has none)")
    if args.nms_key == "auto":
        key = BoxKey.PROPOSAL if dets and all(has_proposals) else BoxKey.REGRESSED
    else:
        key = BoxKey(args.nms_key)
        if key is BoxKey.PROPOSAL and not all(has_proposals):
            raise CliError("--nms-key proposal needs a proposal field on every record")
    config = PostprocessConfig(k=args.k, m=args.m, score_floor=args.score_floor,
                               per_class=not args.class_agnostic, nms_key=key)
    records = [ProposalRecord(d.proposal or d.box, d.box, d.score, d.class_id, d.image_id)
               for d in dets]
    extra = {}
    if args.method == "soft-nms":
        extra = dict(sigma=args.sigma, mode=SoftMode(args.soft_mode), iou_thresh=args.soft_thresh)
    out = postprocess(records, args.method, config, **extra)
    if not all(has_proposals):
        out = [dataclasses.replace(d, proposal=None) for d in out]
    return format_detections(out)


def cmd_eval(args) -> tuple[str, str]:
    dets = read_detections(args.dets)
    gts = read_ground_truth(args.gts)
    shared = {d.image_id for d in dets} & {g.image_id for g in gts}
    if not shared:
        return render_report(zero_report("no_shared_image_ids")), \
            "warning: detections and ground truth share no image_id; metrics are all zero\n"
    return render_report(evaluate(dets, gts, args.tau)), ""


def _config(args) -> SimConfig:
    cfg = load_config(args.config, args.set or (), args.seed)
    if getattr(args, "pipeline", None):
        cfg = dataclasses.replace(cfg, pipeline=Pipeline(args.pipeline))
    return cfg


def cmd_simulate(args) -> str:
    return render_report(run_experiment(_config(args)))


def parse_axis_values(axis: SweepAxis, text: str) -> list:
    out = []
    for item in (t.strip() for t in text.split(",")):
        if not item:
            continue
        try:
            if axis is SweepAxis.PROPOSAL_QUALITY:
                lo, hi = item.split(":")
                out.append((float(lo), float(hi)))
            elif axis is SweepAxis.GROUP_SIZE:
                out.append(int(item))
            elif axis is SweepAxis.REGRESSOR_MODE:
                out.append(RegressorMode(item).value)
            else:
                out.append(float(item))
        except ValueError:
            hint = " (write bands as lo:hi)" if axis is SweepAxis.PROPOSAL_QUALITY else ""
            raise CliError(f"invalid value {item!r} for axis {axis.value}{hint}") from None
    if not out:
        raise CliError("--values is empty")
    return out


def axis_label(value) -> str:
    if isinstance(value, tuple):
        return ":".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return _fmt(value)
    return str(value)


def _check_axis_values(cfg: SimConfig, axis: SweepAxis, values: Sequence) -> None:
    errors = []
    for v in values:
        try:
            with_axis(cfg, axis, v)
        except ValueError as e:
            errors.append(f"{axis_label(v)}: {e}")
    if errors:
        raise CliError("invalid sweep values:\n  " + "\n  ".join(errors))


def cmd_sweep(args) -> str:
    cfg = _config(args)
    axis = SweepAxis(args.axis)
    values = parse_axis_values(axis, args.values)
    try:
        pipelines = [Pipeline(p.strip()) for p in args.pipelines.split(",") if p.strip()]
    except ValueError:
        raise CliError(f"invalid --pipelines {args.pipelines!r}; "
                       f"choose from {', '.join(p.value for p in Pipeline)}") from None
    if not pipelines:
        raise CliError("--pipelines is empty")
    _check_axis_values(cfg, axis, values)
    rows = sweep(cfg, axis, values, pipelines)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("axis_value", "pipeline") + CSV_COLUMNS)
    for row in rows:
        d = row.report.as_dict()
        writer.writerow([axis_label(row.value), row.pipeline.value] + [_fmt(d[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# argument parsing

def _unit(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and 0.0 <= v <= 1.0):
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {text}")
    return v


def _open_unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="RNG seed; overrides rng_seed from the config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uoi", description="Detection post-processing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("postprocess", help="merge or suppress raw detections")
    p.add_argument("--method", required=True, choices=sorted(POSTPROCESSORS))
    p.add_argument("--k", type=_open_unit, default=0.5, help="grouping / suppression IoU threshold")
    p.add_argument("--m", type=_positive_int, default=5, help="maximum group size for uoi")
    p.add_argument("--score-floor", type=_unit, default=0.05)
    p.add_argument("--nms-key", choices=("auto", "proposal", "regressed"), default="auto",
                   help="box used for suppression; auto picks proposal when every record has one")
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--sigma", type=float, default=0.5, help="soft-nms gaussian sigma")
    p.add_argument("--soft-mode", choices=[m.value for m in SoftMode], default="gaussian")
    p.add_argument("--soft-thresh", type=_unit, default=0.3, help="soft-nms linear threshold")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="-", help="output file, '-' for standard output")

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--tau", type=_unit, default=0.5)

    p = sub.add_parser("simulate", help="run one simulated experiment")
    _add_config_args(p)
    p.add_argument("--pipeline", choices=[x.value for x in Pipeline])

    p = sub.add_parser("sweep", help="sweep one simulator axis, CSV on standard output")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=[a.value for a in SweepAxis])
    p.add_argument("--values", required=True,
                   help="comma-separated list; proposal-quality bands as lo:hi")
    p.add_argument("--pipelines", default="wta,uoi")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    warning = ""
    try:
        if args.command == "postprocess":
            text = cmd_postprocess(args)
        elif args.command == "eval":
            text, warning = cmd_eval(args)
        elif args.command == "simulate":
            text = cmd_simulate(args)
        else:
            text = cmd_sweep(args)
    except (CliError, FormatError, FileNotFoundError, SimConfigError, ValueError) as e:
        print(f"uoi: error: {e}", file=sys.stderr)
        return 1
    if warning:
        sys.stderr.write(warning)
    out = getattr(args, "out", "-")
    if out == "-":
        sys.stdout.write(text)
    else:
        try:
            with open(out, "w") as fh:
                fh.write(text)
        except OSError as e:
            print(f"uoi: error: cannot write {out}: {e.strerror}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
