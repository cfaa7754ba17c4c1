"""Command-line entry point: ``mmasd <command> [options]``.

Exit status is 0 on success, 1 on invalid input, configuration or usage, and
2 on I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from mmasd import ACTION_NAMES
from mmasd.autograd.serialize import load_tensors
from mmasd.config import RunConfig, load_config, parse_overrides
from mmasd.errors import MMASDError, UsageError
from mmasd.flow import clip_flow, colorize, farneback, to_gray
from mmasd.io import (
    load_samples, read_clip, read_labels, read_mesh, read_skeleton, save_samples, write_clip, write_flow,
)
from mmasd.model import MultimodalModel
from mmasd.pipeline import (
    Dataset, evaluate, independent_mode, predict, results_dict, stratified_split, synth_dataset, train_loop,
    write_confusion_csv, write_json,
)
from mmasd.preprocess import AUGMENT_ANGLES, augment_sample, build_sample, rasterize_mesh
from mmasd.tracking import crop_tracks, load_detections, track_video, write_tracks

log = logging.getLogger("mmasd")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _pool_map(fn, items, jobs: int):
    """Order-preserving map, in a process pool when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _out_dir(args, default: str, cfg: RunConfig) -> Path:
    """Create the output directory and echo the resolved configuration into it."""
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_track(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "tracks", cfg)
    dets = load_detections(args.detections)
    tracker = track_video(dets, cfg.tracker())
    tracks = tracker.confirmed()
    write_tracks(out / "tracks.jsonl", tracks)
    if args.video:
        video = read_clip(args.video)
        crops = crop_tracks(video, tracks, size=cfg.tracker().crop_size, first_frame=args.first_frame)
        for tid, (frames, clip) in crops.items():
            write_clip(out / f"person_{tid:03d}.mmc", clip)
    log.info("%d detections -> %d confirmed tracks", len(dets), len(tracks))
    print(f"{len(tracks)} tracks written to {out}")
    return EXIT_OK


def _flow_pair(job):
    a, b, flow_cfg = job
    return farneback(a, b, flow_cfg)


def cmd_flow(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "flow", cfg)
    clip = read_clip(args.clip)
    if clip.shape[1] < 2:
        raise UsageError("flow needs a clip with at least two frames")
    frames = [to_gray(clip[:, i]) for i in range(clip.shape[1])]
    jobs = [(a, b, cfg.flow()) for a, b in zip(frames[:-1], frames[1:])]
    fields = _pool_map(_flow_pair, jobs, args.jobs) if args.jobs > 1 else clip_flow(clip, cfg.flow())
    for i, f in enumerate(fields):
        write_flow(out / f"flow_{i:04d}.mmf", f)
    write_clip(out / "flow_clip.mmc", colorize(fields, args.max_magnitude))
    print(f"{len(fields)} flow fields written to {out}")
    return EXIT_OK


def cmd_rasterize(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "mesh", cfg)
    mesh = read_mesh(args.mesh)
    clip = rasterize_mesh(mesh, resolution=args.resolution, radius_px=args.radius,
                          frames=args.frames or None)
    write_clip(out / "mesh_clip.mmc", clip)
    print(f"mesh clip {clip.shape} written to {out / 'mesh_clip.mmc'}")
    return EXIT_OK


def _preprocess_one(job):
    inputs, row = job
    base = Path(inputs) / row.clip_id
    return build_sample(read_clip(f"{base}.flow.mmc"), read_mesh(f"{base}.mesh.mmm"), read_skeleton(f"{base}.skel.csv"),
                        row.action_label, row.asd_label, clip_id=row.clip_id)


def cmd_preprocess(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "samples", cfg)
    rows = list(read_labels(args.labels).values())
    samples = _pool_map(_preprocess_one, [(args.inputs, r) for r in rows], args.jobs)
    save_samples(out, samples)
    print(f"{len(samples)} samples written to {out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "augmented", cfg)
    samples = load_samples(args.data)
    result = list(samples)
    for s in samples:
        result += [augment_sample(s, a) for a in AUGMENT_ANGLES]
    save_samples(out, result)
    print(f"{len(samples)} samples expanded to {len(result)} in {out}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "synthetic", cfg)
    ds = synth_dataset(args.per_class, seed=args.seed if args.seed is not None else 0, cfg=cfg.synth())
    save_samples(out, ds.samples)
    write_json(out / "dataset.json", {"provenance": ds.provenance, "per_class": args.per_class,
                                      "seed": args.seed if args.seed is not None else 0,
                                      "synth": {k.split(".", 1)[1]: v for k, v in cfg.values.items()
                                                if k.startswith("synth.")}})
    print(f"{len(ds)} synthetic samples written to {out}")
    return EXIT_OK


def _load_dataset(path) -> Dataset:
    return Dataset(load_samples(path), "files")


def _split(ds: Dataset, cfg: RunConfig):
    return stratified_split(ds, cfg["split.ratio"], cfg["split.seed"])


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "run", cfg)
    ds = _load_dataset(args.data)
    train, test = (ds, Dataset([], ds.provenance)) if args.no_split else _split(ds, cfg)
    model_cfg, tcfg = cfg.model(), cfg.train()
    split_info = {"ratio": cfg["split.ratio"], "seed": cfg["split.seed"], "no_split": args.no_split,
                  "train_ids": [s.clip_id for s in train.samples], "test_ids": [s.clip_id for s in test.samples]}
    write_json(out / "split.json", split_info)
    if args.mode == "independent":
        if not len(test):
            raise UsageError("independent mode needs a test split")
        write_json(out / "metrics.json", independent_mode(train, test, model_cfg, tcfg))
        print(f"independent-mode metrics written to {out / 'metrics.json'}")
        return EXIT_OK
    model = MultimodalModel(model_cfg, seed=tcfg.seed)
    hist = train_loop(model, train, tcfg)
    model.save(out / "checkpoint", extra={"split": {k: split_info[k] for k in ("ratio", "seed", "no_split")}})
    write_json(out / "history.json", hist.to_dict())
    tr_m = evaluate(model, train)
    metrics = {"train": {"action": tr_m[0].to_dict(), "asd": tr_m[1].to_dict()}}
    if len(test):
        te_m = evaluate(model, test)
        metrics = results_dict(tr_m, te_m)
        write_confusion_csv(out / "confusion_action.csv", te_m[0], ACTION_NAMES)
        write_confusion_csv(out / "confusion_asd.csv", te_m[1], ("TD", "ASD"))
    write_json(out / "metrics.json", metrics)
    final = hist.epochs[-1] if hist.epochs else {}
    print(f"trained {len(hist.epochs)} epochs (final loss {final.get('loss', float('nan')):.4f}); "
          f"checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _checkpoint(path) -> tuple[MultimodalModel, dict]:
    _, manifest = load_tensors(path)
    return MultimodalModel.load(path), manifest


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "eval", cfg)
    model, manifest = _checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    split = manifest.get("split", {})
    if args.subset == "all" or split.get("no_split"):
        data = ds
    else:
        train, test = stratified_split(ds, split.get("ratio", cfg["split.ratio"]), split.get("seed", cfg["split.seed"]))
        data = test if args.subset == "test" else train
    if not len(data):
        raise UsageError(f"the {args.subset} subset is empty")
    act, asd = evaluate(model, data)
    metrics = {args.subset: {"action": act.to_dict(), "asd": asd.to_dict()}}
    write_json(out / "metrics.json", metrics)
    print(json.dumps({k: {t: round(m["accuracy"], 4) for t, m in v.items()} for k, v in metrics.items()}))
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    model, _ = _checkpoint(args.checkpoint)
    samples = load_samples(args.data)
    if args.clip_id:
        wanted = set(args.clip_id)
        samples = [s for s in samples if s.clip_id in wanted]
        missing = wanted - {s.clip_id for s in samples}
        if missing:
            raise UsageError(f"clip ids not in {args.data}: {', '.join(sorted(missing))}")
    pa, ps = predict(model, samples)
    rows = []
    for s, a, d in zip(samples, pa, ps):
        k = int(np.argmax(a))
        rows.append({"clip_id": s.clip_id, "action": ACTION_NAMES[k], "action_index": k, "asd": bool(d[1] > d[0]),
                     "action_probabilities": {n: float(p) for n, p in zip(ACTION_NAMES, a)},
                     "asd_probability": float(d[1])})
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        out = _out_dir(args, "predictions", cfg)
        (out / "predictions.jsonl").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="seed for splits, initialization and shuffling")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-item work")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmasd", description="Multimodal action and ASD classification toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    p = sub.add_parser("track", help="detections JSONL (+ clip) -> tracks and per-person clips")
    p.add_argument("--detections", required=True)
    p.add_argument("--video", default=None, help="clip file the detections refer to")
    p.add_argument("--first-frame", type=int, default=0, help="detection frame index of the clip's first frame")

    p = sub.add_parser("flow", help="clip -> dense flow fields and colorized flow clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--max-magnitude", type=float, default=None, help="fixed brightness scale (default: clip max)")

    p = sub.add_parser("rasterize", help="mesh sequence -> clip")
    p.add_argument("--mesh", required=True)
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--frames", type=int, default=40, help="output frames (0 keeps all)")

    p = sub.add_parser("preprocess", help="modality files + labels -> sample directory")
    p.add_argument("--inputs", required=True, help="directory holding <id>.flow.mmc, <id>.mesh.mmm, <id>.skel.csv")
    p.add_argument("--labels", required=True)

    p = sub.add_parser("augment", help="add rotated copies of every sample")
    p.add_argument("--data", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--frames", type=int, default=None, help="shorthand for synth.frames")
    p.add_argument("--size", type=int, default=None, help="shorthand for synth.size")

    p = sub.add_parser("train", help="split, train, evaluate and checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--preset", choices=("micro", "full"), default=None, help="shorthand for model.preset")
    p.add_argument("--mode", choices=("joint", "independent"), default="joint")
    p.add_argument("--no-split", action="store_true", help="train on every sample")

    p = sub.add_parser("eval", help="score a checkpoint on the recorded split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")

    p = sub.add_parser("predict", help="per-sample action and ASD predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip-id", action="append", default=None)

    for action in sub.choices.values():
        _common(action)
    return parser


COMMANDS = {"track": cmd_track, "flow": cmd_flow, "rasterize": cmd_rasterize, "preprocess": cmd_preprocess,
            "augment": cmd_augment, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict}

# dedicated flags and the config keys they set
_FLAG_KEYS = {"epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size",
              "augment": "train.augment", "preset": "model.preset", "frames": "synth.frames", "size": "synth.size"}


def _flag_overrides(args) -> dict[str, str]:
    out = parse_overrides(args.overrides)
    if args.seed is not None:
        out.update({"train.seed": str(args.seed), "split.seed": str(args.seed)})
    for attr, key in _FLAG_KEYS.items():
        if args.command == "synth" and key.startswith("train."):
            continue
        if args.command != "synth" and key.startswith("synth."):
            continue
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    return out


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _flag_overrides(args), args.command)
        log.info("resolved configuration:\n%s", cfg.dump())
        return COMMANDS[args.command](args, cfg)
    except MMASDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
