"""Command-line entry point: one subcommand per pipeline phase plus
evaluation, loss verification, curriculum planning and the streaming gate.

Subcommands only talk to each other through files. Errors are reported on
stderr as one JSON object and mapped to distinct exit codes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import jsonschema

from . import datastore, pipeline
from .clients import Archive, ClientError, http_suite, mock_suite
from .cot import CoTParseError
from .datastore import RunConfig, SchemaViolation
from .metrics import EvalRecord, UndefinedMetricError, evaluate_classification, evaluate_grounding
from .narration import NarrationParseError
from .scene_gate import EmbeddingSample, GateConfig, ProtocolError, StreamingGate, SubclipRecord

log = logging.getLogger("gvad")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_CLIENT = 5
EXIT_PARSE = 6

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected failure
  2  usage or configuration error
  3  missing input file
  4  schema violation in an input file
  5  service client or transport failure
  6  unparseable model output or undefined metric
"""


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def _config(args) -> RunConfig:
    try:
        return RunConfig.load(args.config, seed=args.seed)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _archive(args) -> Archive | None:
    return Archive(args.archive) if args.archive else None


def _suite(args, cfg: RunConfig, archive: Archive | None):
    if args.mock:
        return mock_suite(cfg.seed, archive=archive, embed_dim=cfg.embed_dim, max_in_flight=cfg.clients.max_in_flight)
    c = cfg.clients
    return http_suite(archive=archive, embed_dim=cfg.embed_dim, timeout=c.timeout, max_retries=c.max_retries,
                      max_in_flight=c.max_in_flight, backoff=c.backoff)


def _videos(path) -> dict[str, dict]:
    return {v["video_id"]: v for v in datastore.read_jsonl(path, "video")}


def _sentences(path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = defaultdict(list)
    if path:
        for s in datastore.read_jsonl(path, "sentence"):
            out[s["video_id"]].append(s)
    return out


def _subclips(path) -> list[SubclipRecord]:
    return [SubclipRecord.from_dict(r) for r in datastore.read_jsonl(path, "subclip")]


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- commands ------------------------------------------------------------------

def cmd_demo_corpus(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    pipeline.write_corpus(out, cfg.seed, args.videos, cfg.embed_dim if args.embeddings else None)
    print(f"wrote synthetic corpus of {args.videos} videos to {out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = _config(args)
    paths = pipeline.run_all(args.out, cfg, n_videos=args.videos, archive=not args.no_archive)
    stats = datastore.read_json(paths["stats"])
    sys.stdout.write(datastore.render_stats(stats))
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    videos = list(_videos(args.videos).values())
    embeddings = None
    archive = _archive(args)
    suite = None
    if args.embeddings:
        embeddings = pipeline.group_embeddings(datastore.iter_jsonl(args.embeddings, "embedding"))
    else:
        suite = _suite(args, cfg, archive)
    subs, retained, pool = pipeline.phase1(videos, cfg, embeddings, suite.embedder if suite else None)
    out = Path(args.out)
    datastore.write_jsonl(out / pipeline.FILES["subclips"], [s.to_dict() for s in subs], "subclip")
    datastore.write_jsonl(out / pipeline.FILES["retained"], [s.to_dict() for s in retained], "subclip")
    datastore.write_jsonl(out / pipeline.FILES["pool"], [s.to_dict() for s in pool], "subclip")
    if archive:
        archive.close()
    print(f"{len(subs)} subclips from {len(videos)} videos; {len(retained)} retained; {len(pool)} for grounding")
    return EXIT_OK


def cmd_narrate(args) -> int:
    cfg = _config(args)
    archive = _archive(args)
    suite = _suite(args, cfg, archive)
    recs = pipeline.narrate_all(_subclips(args.subclips), _videos(args.videos), _sentences(args.sentences), suite.vlm, cfg)
    datastore.write_jsonl(args.out, recs, "annotation")
    if archive:
        archive.close()
    flagged = sum(1 for r in recs if r.get("flags"))
    print(f"narrated {len(recs)} subclips ({flagged} flagged) -> {args.out}")
    return EXIT_OK


def cmd_ground(args) -> int:
    cfg = _config(args)
    archive = _archive(args)
    suite = _suite(args, cfg, archive)
    anns = datastore.read_jsonl(args.annotations, "annotation")
    for i, r in enumerate(anns, start=1):
        missing = [k for k in ("video_id", "start_frame", "end_frame", "label") if k not in r]
        if missing:
            raise SchemaViolation(args.annotations, i, f"missing {missing}")
    recs = pipeline.ground_all(anns, _videos(args.videos), suite.detector, cfg)
    datastore.write_jsonl(args.out, recs, "grounded")
    if archive:
        archive.close()
    total = sum(len(r["objects"]) for r in recs)
    boxed = sum(o["bbox_2d"] is not None for r in recs for o in r["objects"])
    print(f"grounded {boxed}/{total} objects in {len(recs)} subclips -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    archive = _archive(args)
    suite = _suite(args, cfg, archive)
    items, rejected = pipeline.synth_all(
        _subclips(args.subclips),
        datastore.read_jsonl(args.annotations, "annotation"),
        datastore.read_jsonl(args.grounded, "grounded"),
        _videos(args.videos),
        suite.vlm,
        cfg,
    )
    datastore.write_jsonl(args.out, items, "instruction")
    rej_path = Path(args.rejected) if args.rejected else Path(args.out).with_name(pipeline.FILES["cot_rejected"])
    datastore.write_jsonl(rej_path, rejected)
    if archive:
        archive.close()
    print(f"{len(items)} instruction items, {len(rejected)} rejected -> {args.out}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    cfg = _config(args)
    videos = list(_videos(args.videos).values())
    grounded = datastore.read_jsonl(args.grounded, "grounded")
    items = datastore.read_jsonl(args.cot, "instruction")
    out = Path(args.out)
    det = datastore.detection_items(grounded, {v["video_id"]: v["media_ref"] for v in videos})
    datastore.write_jsonl(out / pipeline.FILES["detection"], det, "detection_item")
    datastore.write_jsonl(out / pipeline.FILES["stage1"], datastore.stage1_items(videos))
    slots = args.stage2_slots if args.stage2_slots is not None else cfg.assemble.stage2_slots
    manifest = datastore.assemble(videos, det, items, cfg.stages, cfg.seed, slots)
    datastore.write_json(out / pipeline.FILES["manifest"], manifest, "manifest")
    for st in manifest["stages"]:
        counts = ", ".join(f"{k}={v}" for k, v in sorted(st["counts"].items()))
        print(f"stage {st['stage']}: {len(st['items'])} items ({counts})")
    return EXIT_OK


def _eval_records(path) -> list[EvalRecord]:
    return [EvalRecord.from_dict(r) for r in datastore.read_jsonl(path, "eval_record")]


def cmd_eval_cls(args) -> int:
    recs = _eval_records(args.records)
    rep = evaluate_classification(recs)
    sys.stdout.write(rep.render())
    if args.out:
        datastore.write_json(args.out, rep.to_dict())
    if args.figures:
        if any(r.score is None for r in recs):
            log.warning("figures need scores on every record; skipped")
        else:
            from .plotting import classification_figures

            for p in classification_figures([r.score for r in recs], [r.label for r in recs], args.figures):
                print(f"figure: {p}")
    return EXIT_OK


def cmd_eval_grounding(args) -> int:
    recs = _eval_records(args.records)
    rep = evaluate_grounding(recs, args.threshold, args.penalize_unmatched)
    sys.stdout.write(rep.render())
    if args.out:
        datastore.write_json(args.out, rep.to_dict())
    if args.figures:
        from .geometry import greedy_best_match
        from .plotting import iou_histogram

        ious = [v for r in recs if r.label == 1 and r.gt_boxes for v in greedy_best_match(r.pred_boxes, r.gt_boxes).ious]
        print(f"figure: {iou_histogram(ious, args.figures, args.threshold)}")
    return EXIT_OK


def cmd_loss_check(args) -> int:
    from .loss_math import gradient_suite

    errors = gradient_suite(args.configs, args.seed if args.seed is not None else 0, args.step)
    worst = max(errors)
    print(f"configurations: {len(errors)}")
    print(f"step: {args.step:g}")
    print(f"max relative error: {worst:.3e}")
    ok = worst <= args.tolerance
    print(f"tolerance {args.tolerance:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_OTHER


def plan_rows(schedule, steps) -> list[str]:
    from .loss_math import end_lr, lr_at, warmup_steps

    head = f"{'stage':>5} {'l_bce':>6} {'l_lm':>6} {'l_giou':>6} {'epochs':>6} {'peak_lr':>9} {'warmup':>7} {'steps':>6} {'start_lr':>9} {'end_lr':>9}  mixture"
    rows = [head]
    for i, st in enumerate(schedule):
        start = 0.0 if i == 0 else end_lr(schedule[i - 1])
        mix = ", ".join(f"{k} {v:g}%" for k, v in st.mixture.items())
        rows.append(
            f"{st.stage:>5} {st.lambda_bce:>6.1f} {st.lambda_lm:>6.1f} {st.lambda_giou:>6.1f} {st.epochs:>6} "
            f"{st.peak_lr:>9.2e} {st.warmup_ratio:>7.2f} {steps[i]:>6} {start:>9.2e} {end_lr(st):>9.2e}  {mix}"
        )
    rows.append("")
    rows.append("lr samples (stage, step, lr):")
    for i, st in enumerate(schedule):
        n = steps[i]
        w = warmup_steps(st, n)
        marks = sorted({0, w // 2, w, (w + n) // 2, n})
        rows.append("  " + "  ".join(f"({st.stage}, {t}, {lr_at(schedule, i, t, steps):.3e})" for t in marks))
    return rows


def cmd_plan(args) -> int:
    from .loss_math import default_schedule, joint_schedule, lr_curve, steps_for

    cfg = _config(args)
    if args.joint:
        schedule = joint_schedule()
    elif args.stage3_peak_lr is not None:
        schedule = default_schedule(args.stage3_peak_lr)
    else:
        schedule = cfg.stages
    samples = list(args.samples)
    if len(samples) < len(schedule):
        raise UsageError(f"--samples needs {len(schedule)} values")
    steps = steps_for(schedule, samples[: len(schedule)], args.batch)
    print("\n".join(plan_rows(schedule, steps)))
    if args.figures:
        from .plotting import lr_figure

        print(f"figure: {lr_figure(lr_curve(schedule, steps), args.figures)}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args)
    d = Path(args.dir)
    videos = datastore.read_jsonl(d / pipeline.FILES["videos"], "video")
    retained = datastore.read_jsonl(d / pipeline.FILES["retained"], "subclip")
    grounded = datastore.read_jsonl(d / pipeline.FILES["grounded"], "grounded")
    items = datastore.read_jsonl(d / pipeline.FILES["cot"], "instruction")
    labels = None
    pool_path = d / pipeline.FILES["pool"]
    if pool_path.exists():
        labels = {s["subclip_id"]: s["label"] for s in datastore.read_jsonl(pool_path, "subclip")}
    stats = datastore.compute_stats(videos, retained, grounded, items, cfg.fps, labels)
    sys.stdout.write(datastore.render_stats(stats))
    if args.out:
        datastore.write_json(args.out, stats, "stats")
    if args.figures:
        from .plotting import stats_figures

        fps = {v["video_id"]: float(v.get("fps") or cfg.fps) for v in videos}
        durations = [(s["end_frame"] - s["start_frame"] + 1) / fps.get(s["video_id"], cfg.fps) for s in retained]
        for p in stats_figures(stats, durations, [len(g["objects"]) for g in grounded], args.figures):
            print(f"figure: {p}")
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = _config(args)
    gate_cfg = GateConfig(cfg.gate.stride, cfg.gate.tau if args.tau is None else args.tau)
    totals = {}
    if args.videos:
        totals = {k: int(v["total_frames"]) for k, v in _videos(args.videos).items()}
    gates: dict[str, StreamingGate] = {}
    src = sys.stdin if args.embeddings == "-" else open(args.embeddings, encoding="utf-8")
    try:
        for n, line in enumerate(src, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                datastore.validate(rec, "embedding")
            except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
                raise SchemaViolation(args.embeddings, n, str(getattr(exc, "message", exc))) from None
            vid = rec["video_id"]
            gate = gates.get(vid)
            if gate is None:
                gate = gates[vid] = StreamingGate(vid, gate_cfg)
            sample = _unit_sample(rec) if args.normalize else EmbeddingSample.of(rec["frame_index"], rec["embedding"])
            done = gate.push(sample)
            if done is not None:
                _emit(done.to_dict())
    finally:
        if src is not sys.stdin:
            src.close()
    for vid in sorted(gates):
        total = totals.get(vid, args.total_frames)
        tail = gates[vid].flush(total)
        if tail is not None:
            _emit(tail.to_dict())
    return EXIT_OK


def _unit_sample(rec) -> EmbeddingSample:
    import numpy as np

    v = np.asarray(rec["embedding"], dtype=float)
    return EmbeddingSample.of(rec["frame_index"], v / np.linalg.norm(v))


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--archive", help="write the request/response transcript (JSONL) here")
    common.add_argument("--mock", action="store_true", help="use the deterministic in-process clients")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(
        prog="gvad",
        description="Grounded video-anomaly dataset pipeline.",
        epilog=EXIT_CODES + "\nservice endpoints: GVAD_VLM_URL, GVAD_DETECTOR_URL, GVAD_EMBED_URL, token GVAD_API_TOKEN",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("segment", cmd_segment, "split videos into subclips and subsample them")
    sp.add_argument("--videos", required=True)
    sp.add_argument("--embeddings", help="precomputed embeddings JSONL; otherwise the embed client is called")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("narrate", cmd_narrate, "object-centric narration of subclips")
    sp.add_argument("--subclips", required=True)
    sp.add_argument("--videos", required=True)
    sp.add_argument("--sentences", help="temporal annotation sentences JSONL")
    sp.add_argument("--out", required=True)

    sp = add("ground", cmd_ground, "anchor-frame grounding of narrated objects")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--videos", required=True)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "chain-of-thought instruction items for retained subclips")
    sp.add_argument("--subclips", required=True, help="retained subclips")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--grounded", required=True)
    sp.add_argument("--videos", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rejected", help="where to list rejected subclips")

    sp = add("assemble", cmd_assemble, "stage-keyed training manifests")
    sp.add_argument("--videos", required=True)
    sp.add_argument("--grounded", required=True)
    sp.add_argument("--cot", required=True)
    sp.add_argument("--stage2-slots", type=int)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("eval-cls", cmd_eval_cls, "ROC-AUC, PR-AUC, accuracy, precision, recall, F1, per-category table")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", help="machine-readable report (JSON)")
    sp.add_argument("--figures", help="directory for ROC / PR figures")

    sp = add("eval-grounding", cmd_eval_grounding, "meanIoU and recall at an IoU threshold")
    sp.add_argument("--records", required=True)
    sp.add_argument("--threshold", type=float, default=0.25)
    sp.add_argument("--penalize-unmatched", action=argparse.BooleanOptionalAction, default=True,
                    help="count unmatched ground-truth boxes as IoU 0 (default on)")
    sp.add_argument("--out")
    sp.add_argument("--figures")

    sp = add("loss-check", cmd_loss_check, "finite-difference check of the GIoU loss gradient")
    sp.add_argument("--configs", type=int, default=50)
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-5)

    sp = add("plan", cmd_plan, "print the curriculum schedule table")
    sp.add_argument("--samples", type=int, nargs="+", default=[1288, 9759, 2092],
                    help="training samples per stage (default: published dataset sizes)")
    sp.add_argument("--batch", type=int, default=8, help="effective batch size")
    sp.add_argument("--stage3-peak-lr", type=float)
    sp.add_argument("--joint", action="store_true", help="single-phase ablation schedule")
    sp.add_argument("--figures")

    sp = add("stats", cmd_stats, "dataset statistics for a pipeline output directory")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out")
    sp.add_argument("--figures")

    sp = add("stream", cmd_stream, "online scene gating over an embedding stream")
    sp.add_argument("--embeddings", default="-", help="JSONL file, or - for stdin")
    sp.add_argument("--videos", help="video records, for total frame counts")
    sp.add_argument("--total-frames", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--normalize", action="store_true", help="L2-normalize incoming embeddings")

    sp = add("demo-corpus", cmd_demo_corpus, "write a synthetic corpus (videos, sentences, embeddings)")
    sp.add_argument("--videos", type=int, default=40)
    sp.add_argument("--embeddings", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("demo", cmd_demo, "synthetic corpus plus every phase with mock clients")
    sp.add_argument("--videos", type=int, default=40)
    sp.add_argument("--no-archive", action="store_true")
    sp.add_argument("--out", required=True)
    return p


def _fail(code: int, exc: BaseException) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("path", "line", "offset"):
        if hasattr(exc, attr):
            report[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(report, sort_keys=True) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except (SchemaViolation, jsonschema.ValidationError) as exc:
        return _fail(EXIT_SCHEMA, exc)
    except ClientError as exc:
        return _fail(EXIT_CLIENT, exc)
    except (UndefinedMetricError, CoTParseError, NarrationParseError, ProtocolError) as exc:
        return _fail(EXIT_PARSE, exc)
    except (KeyError, ValueError) as exc:
        return _fail(EXIT_OTHER, exc)
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head); not an error
        import os

        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
