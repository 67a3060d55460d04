"""Command-line front door.

Verbs: featurize, augment-preview, train, infer, eval, synth. Every verb
takes ``--config`` (a flat JSON file) and specific flags that override
single config keys; flags win. Exit codes: 0 success, 2 usage, 3 data
error, 4 numeric failure.
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np
from PIL import Image

from .audio_io import ingest
from .augment import augment_chunked
from .config import (
    PipelineConfig,
    augment_config,
    cache_path,
    config_hash,
    feature_hash,
    load_config,
    train_config,
)
from .dataset import (
    NEGATIVE_ID,
    Annotation,
    InsufficientData,
    Segment,
    load_manifest,
    oversample,
    parse_annotations,
    segment_events,
)
from .events import postprocess, read_events_csv, write_events_csv
from .evalmetrics import DEFAULT_MIN_IOU, FileCounts, format_report, match_events, score
from .frontend import FeatureMatrix, featurize, load_cache, save_cache
from .protonet import NonFiniteLoss, assemble_task, detect, shot_intervals, train
from .synth import SynthSpec, synth_file
from .tensornet import Encoder, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class WrongShotCount(ValueError):
    """The shots CSV does not hold exactly 5 POS rows."""


class ConfigHashMismatch(ValueError):
    """Checkpoint was trained under an incompatible config."""


def _features_for(wav: str, cfg: PipelineConfig) -> FeatureMatrix:
    w = ingest(wav)
    if cfg.scaling == "pcen":
        return featurize(
            w,
            "pcen",
            s=cfg.pcen_s,
            alpha=cfg.pcen_alpha,
            delta=cfg.pcen_delta,
            r=cfg.pcen_r,
            eps=cfg.pcen_eps,
        )
    return featurize(w, cfg.scaling)


def _sha1(path: str) -> str:
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _meta_path(cache: str) -> str:
    return cache + ".meta.json"


def _cache_fresh(cache: str, fhash: str, wav_sha1: str) -> int | None:
    """Frame count recorded for a still-valid cache, else None."""
    if not os.path.exists(cache):
        return None
    try:
        with open(_meta_path(cache)) as fh:
            meta = json.load(fh)
    except (OSError, ValueError):
        return None
    if meta.get("feature_hash") == fhash and meta.get("wav_sha1") == wav_sha1:
        return int(meta["n_frames"])
    return None


def _featurize_job(job) -> tuple[str, int, bool, str]:
    """One wav -> cache conversion; returns (wav, frames, skipped, error)."""
    wav, cache, cfg_dict, force = job
    cfg = PipelineConfig(**cfg_dict)
    try:
        fhash = feature_hash(cfg)
        wav_sha1 = _sha1(wav)
        if not force:
            frames = _cache_fresh(cache, fhash, wav_sha1)
            if frames is not None:
                return wav, frames, True, ""
        m = _features_for(wav, cfg)
        os.makedirs(os.path.dirname(cache) or ".", exist_ok=True)
        save_cache(cache, m)
        with open(_meta_path(cache), "w") as fh:
            json.dump(
                {"feature_hash": fhash, "wav_sha1": wav_sha1, "n_frames": m.n_frames}, fh
            )
            fh.write("\n")
        return wav, m.n_frames, False, ""
    except Exception as exc:  # worker boundary: report, let the parent decide
        return wav, -1, False, f"{type(exc).__name__}: {exc}"


def cmd_featurize(args) -> int:
    """Compute one feature cache per manifest wav, skipping fresh ones."""
    cfg = load_config(args.config, _overrides(args, ["seed"]))
    manifest = load_manifest(args.manifest)
    jobs = []
    seen = set()
    for entries in manifest.values():
        for e in entries:
            cache = cache_path(e["cache"], cfg)
            if cache in seen:
                continue
            seen.add(cache)
            jobs.append((e["wav"], cache, asdict(cfg), args.force))

    workers = args.workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_featurize_job, jobs))
    else:
        results = [_featurize_job(j) for j in jobs]

    failures = []
    recomputed = 0
    for wav, frames, skipped, error in results:
        if error:
            failures.append((wav, error))
            continue
        recomputed += 0 if skipped else 1
        print(f"{wav}: {frames} frames" + (" (cached)" if skipped else ""))
    print(f"{recomputed} of {len(jobs)} file(s) recomputed")
    if failures:
        print(f"{len(failures)} file(s) failed:", file=sys.stderr)
        for wav, error in failures:
            print(f"  {wav}: {error}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    """Write the original and every augmentation variant as grayscale PNGs."""
    cfg = load_config(args.config, _overrides(args, ["seed"]))
    m = _features_for(args.wav, cfg)
    variants = augment_chunked(m, augment_config(cfg))
    names = ["original", "time-mask", "freq-mask"] + [
        f"stretch-{f:g}".replace(".", "") for f in cfg.stretch_factors
    ]
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.wav))[0]
    lo, hi = float(m.values.min()), float(m.values.max())
    span = (hi - lo) or 1.0
    for name, fm in zip(names, [m] + variants):
        scaled = np.clip((fm.values - lo) / span, 0.0, 1.0)
        img = (scaled[::-1] * 255.0).round().astype(np.uint8)  # low bins at the bottom
        path = os.path.join(args.out, f"{stem}.{name}.png")
        Image.fromarray(img, mode="L").save(path)
        print(path)
    return EXIT_OK


def _stretched(anns: list[Annotation], factor: float) -> list[Annotation]:
    return [
        Annotation(a.audio_file, a.onset_s / factor, a.offset_s / factor, dict(a.labels))
        for a in anns
    ]


def _file_views(m, anns, cfg: PipelineConfig, augmented: bool):
    """(matrix, annotations) pairs: the original plus augmentation variants."""
    views = [(m, anns)]
    if augmented:
        acfg = augment_config(cfg)
        variants = augment_chunked(m, acfg)
        views.append((variants[0], anns))
        views.append((variants[1], anns))
        for factor, vm in zip(acfg.stretch_factors, variants[2:]):
            views.append((vm, _stretched(anns, factor)))
    return views


def _segment_views(views, cfg, name_to_id) -> list[Segment]:
    out = []
    for vm, vanns in views:
        pos_names = sorted(
            {n for a in vanns for n, v in a.labels.items() if v == "POS"}
        )
        if not pos_names:
            out.extend(segment_events(vm, vanns, cfg.width, class_name=""))
            continue
        for i, name in enumerate(pos_names):
            segs = segment_events(vm, vanns, cfg.width, name, class_id=name_to_id[name])
            if i > 0:  # negatives are identical across classes; keep one copy
                segs = [s for s in segs if s.class_id != NEGATIVE_ID]
            out.extend(segs)
    return out


def _build_pools(manifest, cfg: PipelineConfig):
    """Per-subset class pools; augmentation applies to train files only."""
    missing = []
    for entries in manifest.values():
        for e in entries:
            c = cache_path(e["cache"], cfg)
            if not os.path.exists(c):
                missing.append(c)
    if missing:
        raise FileNotFoundError(
            "missing feature caches (run featurize first): " + ", ".join(sorted(missing))
        )

    names = set()
    parsed = {}
    for subset, entries in manifest.items():
        parsed[subset] = []
        for e in entries:
            anns = parse_annotations(e["csv"])
            m = load_cache(cache_path(e["cache"], cfg))
            parsed[subset].append((m, anns))
            names.update(n for a in anns for n, v in a.labels.items() if v == "POS")
    name_to_id = {n: i for i, n in enumerate(sorted(names), start=1)}

    pools = {}
    for subset, files in parsed.items():
        segments = []
        for m, anns in files:
            views = _file_views(m, anns, cfg, cfg.augment and subset == "train")
            segments.extend(_segment_views(views, cfg, name_to_id))
        pools[subset] = segments
    return pools, name_to_id


def _group(segments: list[Segment]) -> dict[int, list[Segment]]:
    pool: dict[int, list[Segment]] = {}
    for s in segments:
        pool.setdefault(s.class_id, []).append(s)
    return pool


def _require_episodes(pool, cfg: PipelineConfig, label: str) -> None:
    per_class = cfg.n_shot + cfg.n_query
    counts = {cid: len(segs) for cid, segs in sorted(pool.items())}
    eligible = [cid for cid, n in counts.items() if n >= per_class]
    if len(eligible) < cfg.n_way:
        raise InsufficientData(
            f"{label} pool: need {cfg.n_way} classes with >= {per_class} segments, "
            f"counts per class: {counts}"
        )


def cmd_train(args) -> int:
    """Episodic training over the manifest's train/val subsets."""
    cfg = load_config(args.config, _overrides(args, ["seed", "epochs"]))
    manifest = load_manifest(args.manifest)
    for subset in ("train", "val"):
        if subset not in manifest:
            raise ValueError(f"{args.manifest}: manifest has no {subset!r} subset")

    pools, name_to_id = _build_pools(manifest, cfg)
    rng = np.random.default_rng(cfg.seed)
    train_pool = _group(oversample(pools["train"], rng))
    val_pool = _group(pools["val"])
    _require_episodes(train_pool, cfg, "train")
    _require_episodes(val_pool, cfg, "val")
    print(
        f"classes: {name_to_id}; train segments: {len(pools['train'])} "
        f"(oversampled to {sum(len(v) for v in train_pool.values())}), "
        f"val segments: {len(pools['val'])}"
    )

    model = Encoder(seed=cfg.seed, n_channels=cfg.n_channels)
    metrics = args.metrics or args.checkpoint + ".metrics.csv"
    history = train(model, train_pool, val_pool, train_config(cfg), args.checkpoint, metrics)
    best = history["best_epoch"]
    print(
        f"best epoch {best}/{cfg.epochs}: val loss {history['val_loss'][best - 1]:.6f}; "
        f"wrote {args.checkpoint} and {metrics}"
    )
    return EXIT_OK


def _single_class(anns: list[Annotation], wanted: str | None, source: str) -> str:
    names = sorted({n for a in anns for n in a.labels})
    if wanted is not None:
        if wanted not in names:
            raise ValueError(f"{source}: no class column {wanted!r} (have {names})")
        return wanted
    if len(names) != 1:
        raise ValueError(f"{source}: several class columns {names}; pass --class-name")
    return names[0]


def cmd_infer(args) -> int:
    """Detect events of the annotated class in one wav, write a CSV."""
    cfg = load_config(args.config, _overrides(args, ["seed", "threshold", "iterations"]))
    model, _, _, header = load_checkpoint(args.checkpoint)
    expected = config_hash(cfg)
    if header.get("config_hash") != expected:
        message = (
            f"checkpoint config hash {header.get('config_hash')!r} != {expected!r}; "
            "trained under an incompatible config"
        )
        if not args.force:
            raise ConfigHashMismatch(message)
        print(f"warning: {message} (continuing under --force)", file=sys.stderr)

    anns = parse_annotations(args.shots)
    class_name = _single_class(anns, args.class_name, args.shots)
    n_pos = sum(1 for a in anns if a.labels.get(class_name) == "POS")
    if n_pos != 5:
        raise WrongShotCount(f"{args.shots}: need exactly 5 POS rows, found {n_pos}")

    name = os.path.basename(args.wav)
    m = _features_for(args.wav, cfg)
    task = assemble_task(
        m, anns, class_name, file_id=name, iterations=cfg.iterations, threshold=cfg.threshold
    )
    probs, query_start = detect(model, task, np.random.default_rng(cfg.seed))

    shots = sorted(
        (a for a in anns if a.labels.get(class_name) == "POS"), key=lambda a: a.onset_s
    )[:5]
    durations = [a.offset_s - a.onset_s for a in shots]
    events = postprocess(probs, query_start, durations, threshold=cfg.threshold, file=name)
    write_events_csv(args.out, [events])
    print(f"{name}: {len(events.events)} event(s) past {query_start} frames -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Score a predictions CSV against reference annotations."""
    preds = read_events_csv(args.predictions)
    anns = parse_annotations(args.reference)
    class_name = _single_class(anns, args.class_name, args.reference)

    by_file: dict[str, dict[str, list]] = {}
    for a in anns:
        slot = by_file.setdefault(a.audio_file, {"pos": [], "unk": []})
        label = a.labels.get(class_name)
        if label == "POS":
            slot["pos"].append((a.onset_s, a.offset_s))
        elif label == "UNK":
            slot["unk"].append((a.onset_s, a.offset_s))

    unknown = sorted(set(preds) - set(by_file))
    if unknown:
        raise ValueError(f"{args.predictions}: files not in the reference: {unknown}")

    if args.skip_shots < 0:
        raise ValueError("--skip-shots must be >= 0")
    per_file = []
    for file, slot in sorted(by_file.items()):
        refs = sorted(slot["pos"])
        if len(refs) < args.skip_shots:
            raise ValueError(
                f"{file}: only {len(refs)} reference events, cannot skip {args.skip_shots}"
            )
        boundary = refs[args.skip_shots - 1][1] if args.skip_shots else 0.0
        scored_refs = refs[args.skip_shots :]
        file_preds = [p for p in preds.get(file, []) if p[0] >= boundary]
        tp, fp, fn = match_events(file_preds, scored_refs, args.iou, unk=slot["unk"])
        per_file.append(FileCounts(file, tp, fp, fn))

    report = score(per_file)
    print(format_report(report))
    if args.out_json:
        payload = {
            "min_iou": args.iou,
            "precision": report.precision,
            "recall": report.recall,
            "f_measure": report.f_measure,
            "f_percent": report.f_percent,
            "per_file": [
                {"file": c.file, "tp": c.tp, "fp": c.fp, "fn": c.fn} for c in report.per_file
            ],
        }
        with open(args.out_json, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.out_json}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Generate one annotated tone/chirp recording."""
    spec = SynthSpec(
        class_name=args.class_name,
        duration_s=args.duration,
        n_events=args.events,
        freq_hz=args.freq,
        kind=args.kind,
        snr_db=args.snr,
        event_dur_s=(args.event_dur[0], args.event_dur[1]),
        background_lfo_db=args.background_lfo,
        dropout_rate_hz=args.dropouts,
        seed=args.seed if args.seed is not None else 0,
    )
    anns = synth_file(args.wav, args.csv, spec)
    print(f"wrote {args.wav} ({spec.duration_s:g} s) and {args.csv} ({len(anns)} events)")
    return EXIT_OK


def _overrides(args, keys: list[str]) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoshot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("featurize", help="compute feature caches for a manifest")
    common(p)
    p.add_argument("manifest", help="JSON manifest: subset -> [{wav, csv, cache}]")
    p.add_argument("--workers", type=int, help="parallel files (default: all cores)")
    p.add_argument("--force", action="store_true", help="recompute even fresh caches")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("augment-preview", help="render augmentation variants as PNGs")
    common(p)
    p.add_argument("wav")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("train", help="train an encoder on a featurized manifest")
    common(p)
    p.add_argument("manifest")
    p.add_argument("checkpoint", help="output checkpoint path")
    p.add_argument("--metrics", help="metrics CSV path (default: <checkpoint>.metrics.csv)")
    p.add_argument("--epochs", type=int, help="override the config epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect events in one wav given 5 shots")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("shots", help="annotation CSV holding exactly 5 POS rows")
    p.add_argument("out", help="output events CSV")
    p.add_argument("--class-name", help="class column (default: the only one)")
    p.add_argument("--threshold", type=float, help="override the config threshold")
    p.add_argument("--iterations", type=int, help="override negative re-draws")
    p.add_argument(
        "--force", action="store_true", help="run despite a config hash mismatch"
    )
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted events against references")
    p.add_argument("predictions", help="events CSV from infer")
    p.add_argument("reference", help="annotation CSV with POS/UNK rows")
    p.add_argument("--class-name", help="class column (default: the only one)")
    p.add_argument("--iou", type=float, default=DEFAULT_MIN_IOU, help="match threshold")
    p.add_argument(
        "--skip-shots", type=int, default=5, help="leading POS events given as shots"
    )
    p.add_argument("--out-json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate an annotated tone/chirp recording")
    p.add_argument("--seed", type=int, help="render seed (default 0)")
    p.add_argument("wav", help="output wav path")
    p.add_argument("csv", help="output annotation CSV path")
    p.add_argument("--class-name", default="Q")
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--events", type=int, default=10)
    p.add_argument("--freq", type=float, default=1000.0, help="centre frequency, Hz")
    p.add_argument("--kind", choices=["tone", "chirp"], default="tone")
    p.add_argument("--snr", type=float, default=12.0, help="event SNR in dB")
    p.add_argument(
        "--event-dur", type=float, nargs=2, default=[0.25, 0.6], metavar=("MIN", "MAX")
    )
    p.add_argument(
        "--background-lfo", type=float, default=0.0,
        help="peak dB of a slow gain drift over the whole mix (default off)",
    )
    p.add_argument(
        "--dropouts", type=float, default=0.0,
        help="brief recording dropouts per second (default off)",
    )
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
