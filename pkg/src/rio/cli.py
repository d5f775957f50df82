"""Command-line entry point: ``rio <subcommand> [flags]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 when every
alignment of a relocalization run failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields, is_dataclass, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .datasynth.manifest import (ManifestError, export_benchmark_bundle, load_scan_manifest,
                                 manifest_from_dict)
from .datasynth.render import render_scene_frames
from .descriptor import (TripletLossConfig, default_arch, init_model, load_model, save_model,
                         train)
from .evaluation import (ScoringError, benchmark, format_report_table, keypoint_matching_metrics,
                         load_predictions, write_prc_csv)
from .keypoints import HarrisConfig, Keypoint, detect, save_keypoints
from .pipeline import (CorpusConfig, PairData, RelocalizeConfig, TripletConfig, benchmark_corpus,
                       dynamic_triplets, make_corpus, relocalize_pair, scene_volume,
                       static_triplets)
from .registration import RansacConfig
from .volume import PatchPairSpec, TsdfVolume, fuse_depth, load_volume, save_volume

log = logging.getLogger("rio")

EXIT_OK, EXIT_INVALID, EXIT_ALL_FAILED = 0, 2, 3


class UsageError(ValueError):
    """Bad flags, files or config values; reported with exit code 2."""


def _data_dir(arg) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get("RIO_DATA_DIR")
    if not env:
        raise UsageError("no dataset directory: pass --data or set RIO_DATA_DIR")
    return Path(env)


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: config file not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return cfg


def _apply(obj, overrides: dict, where: str):
    """Dataclass ``obj`` with fields replaced from ``overrides`` (nested
    dataclasses take nested dicts); unknown keys are rejected."""
    names = {f.name: f for f in fields(obj)}
    kw = {}
    for k, v in overrides.items():
        if k not in names:
            raise UsageError(f"{where}: unknown key {k!r}")
        cur = getattr(obj, k)
        if is_dataclass(cur) and isinstance(v, dict):
            kw[k] = _apply(cur, v, f"{where}.{k}")
        elif isinstance(cur, tuple) and isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{where}: {e}") from e


def _dump(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _corpus_config(args, cfg: dict) -> CorpusConfig:
    c = _apply(replace(benchmark_corpus(), seed=args.seed), cfg.get("corpus", {}), "corpus")
    if getattr(args, "pairs", None) is not None:
        c = _apply(c, {"n_pairs": args.pairs}, "corpus")
    return c


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    corpus = _corpus_config(args, cfg)
    manifests = make_corpus(corpus)
    out = Path(args.out)
    export_benchmark_bundle(manifests, out, lambda s: scene_volume(s, corpus))
    _dump({"corpus": _jsonable(corpus)}, out / "corpus.json")
    if args.hidden_out:
        export_benchmark_bundle(manifests, args.hidden_out, lambda s: scene_volume(s, corpus),
                                hidden=True)
    print(f"wrote {len(manifests)} scan pairs to {out}")
    return EXIT_OK


def _jsonable(obj):
    if is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _load_manifest_file(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: file not found")
    try:
        return manifest_from_dict(json.loads(p.read_text()), str(p))
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid JSON ({e})") from e


def cmd_fuse(args, cfg) -> int:
    man = _load_manifest_file(args.manifest)
    scene = man.reference if args.which == "reference" else man.rescan
    if scene is None:
        raise UsageError(f"{args.manifest}: no {args.which} scene (hidden manifest?)")
    corpus = _corpus_config(args, cfg)
    if args.voxel_size is not None:
        corpus = _apply(corpus, {"voxel_size": args.voxel_size}, "corpus")
    if args.method == "analytic":
        vol = scene_volume(scene, corpus)
    else:
        frames = render_scene_frames(scene, args.frames, seed=args.seed)
        vol = fuse_depth(frames, **corpus.grid(scene))
    save_volume(vol, args.out)
    print(f"wrote {vol.dims} volume to {args.out}")
    return EXIT_OK


def _harris(args, cfg) -> HarrisConfig:
    h = _apply(HarrisConfig(), cfg.get("harris", {}), "harris")
    over = {k: v for k, v in (("k", getattr(args, "k", None)),
                              ("min_response", getattr(args, "min_response", None)),
                              ("nms_radius", getattr(args, "nms_radius", None))) if v is not None}
    return _apply(h, over, "harris")


def cmd_keypoints(args, cfg) -> int:
    vol = _load_volume(args.volume)
    harris = _harris(args, cfg)
    pos, resp = detect(vol, harris)
    save_keypoints([Keypoint(tuple(p), float(r)) for p, r in zip(pos, resp)], args.out)
    print(f"{len(pos)} keypoints written to {args.out}")
    return EXIT_OK


def _load_volume(path) -> TsdfVolume:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: file not found")
    try:
        return load_volume(p)
    except ValueError as e:
        raise UsageError(f"{p}: {e}") from e


def _load_model(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: file not found")
    try:
        return load_model(p)
    except ValueError as e:
        raise UsageError(f"{p}: {e}") from e


def _load_pairs(root: Path, corpus: CorpusConfig, split: str | None, pair_ids=None):
    ds = load_scan_manifest(root)
    ids = ds.ids(split) if not pair_ids else list(pair_ids)
    missing = [i for i in ids if i not in ds.manifests]
    if missing:
        raise UsageError(f"unknown scan pair ids: {missing}")
    pairs = []
    for i in ids:
        src = _load_volume(ds.volume_path(i, "reference"))
        tgt = _load_volume(ds.volume_path(i, "rescan-0"))
        pairs.append(PairData(ds.manifests[i], src, tgt, corpus))
    return pairs


def _model_for(args, cfg):
    if args.init:
        return _load_model(args.init)
    scales = args.scales.split(",")
    if not scales or any(s not in ("fine", "coarse") for s in scales):
        raise UsageError(f"--scales must list fine and/or coarse, got {args.scales!r}")
    return init_model(default_arch(scales), seed=args.seed)


def cmd_train(args, cfg) -> int:
    root = _data_dir(args.data)
    corpus = _corpus_config(args, cfg)
    tcfg = _apply(TripletConfig(), cfg.get("triplets", {}), "triplets")
    if args.triplets_per_pair is not None:
        tcfg = _apply(tcfg, {"per_pair": args.triplets_per_pair}, "triplets")
    loss_cfg = _apply(TripletLossConfig(), cfg.get("loss", {}), "loss")
    over = {k: v for k, v in (("learning_rate", args.lr), ("batch_size", args.batch_size),
                              ("margin", args.margin)) if v is not None}
    loss_cfg = _apply(loss_cfg, over, "loss")
    harris = _harris(args, cfg)
    if args.freeze_sse and args.stage != "dynamic":
        raise UsageError("--freeze-sse applies to the dynamic stage only")
    model = _model_for(args, cfg)
    if args.freeze_sse and model.meta.get("epoch", 0) == 0:
        raise UsageError("--freeze-sse needs a pre-trained model (--init)")
    spec = PatchPairSpec(resolution=model.resolution)
    pairs = _load_pairs(root, corpus, args.split)
    if not pairs:
        raise UsageError(f"no scan pairs in split {args.split!r}")
    if args.stage == "static":
        scenes = [p.manifest.reference for p in pairs]
        triplets = static_triplets(scenes, corpus, spec, tcfg, args.seed, harris)
    else:
        triplets = dynamic_triplets(pairs, spec, tcfg, args.seed, harris)
    log.info("%d %s triplets", len(triplets), args.stage)
    freeze = "sse_frozen" if args.freeze_sse else "none"
    res = train(model, triplets, loss_cfg, freeze=freeze, epochs=args.epochs, seed=args.seed,
                stage=args.stage,
                progress=lambda ep, loss: log.info("epoch %d loss %.4f", ep, loss))
    save_model(res.model, args.out)
    loss_path = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    with open(loss_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "loss"])
        per_epoch = max(1, -(-len(triplets) // loss_cfg.batch_size))
        for i, loss in enumerate(res.batch_losses):
            w.writerow([i, i // per_epoch, f"{loss:.8g}"])
    print(f"trained on {len(triplets)} triplets; model written to {args.out}")
    return EXIT_OK


def cmd_relocalize(args, cfg) -> int:
    root = _data_dir(args.data)
    corpus = _corpus_config(args, cfg)
    model = _load_model(args.model)
    rcfg = RelocalizeConfig(PatchPairSpec(resolution=model.resolution), _harris(args, cfg),
                            _apply(RansacConfig(seed=args.seed), cfg.get("ransac", {}), "ransac"))
    rcfg = _apply(rcfg, cfg.get("relocalize", {}), "relocalize")
    pairs = _load_pairs(root, corpus, args.split, args.pair)
    preds, diags = [], {}
    for p in pairs:
        pr, dg = relocalize_pair(model, p, rcfg)
        preds += pr
        diags[p.manifest.scan_pair_id] = {str(k): v for k, v in dg.items()}
    _dump([p.to_dict() for p in preds], args.out)
    if args.diagnostics:
        _dump(diags, args.diagnostics)
    n_ok = sum(not p.failed for p in preds)
    print(f"{n_ok}/{len(preds)} instances aligned; predictions written to {args.out}")
    if preds and n_ok == 0:
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    root = _data_dir(args.data)
    ds = load_scan_manifest(root)
    ids = ds.ids(args.split) if args.split else ds.ids()
    gt = [{"scan_pair_id": i, "instances": ds.manifests[i].instances} for i in ids]
    p = Path(args.predictions)
    if not p.exists():
        raise UsageError(f"{p}: file not found")
    preds = load_predictions(p)
    unknown = sorted({x.scan_pair_id for x in preds} - set(ds.manifests))
    if unknown:
        raise UsageError(f"{p}: predictions for unknown scan pairs {unknown}")
    preds = [x for x in preds if x.scan_pair_id in set(ids)]
    report = benchmark(preds, gt, class_mapping=cfg.get("class_mapping"))
    out = report.to_dict()
    if args.distances:
        d = json.loads(Path(args.distances).read_text())
        mm = keypoint_matching_metrics(d["positive"], d["negative"])
        out["keypoint_matching"] = mm.as_dict()
        if args.prc_csv:
            write_prc_csv(mm, args.prc_csv)
    _dump(out, args.out)
    table = format_report_table({args.name: report})
    text_path = Path(args.table) if args.table else Path(args.out).with_suffix(".txt")
    text_path.write_text(table + "\n")
    print(table)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="cap on BLAS threads; 1 runs strictly sequentially")
    common.add_argument("--config", help="JSON file with per-module settings")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rio", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int)
    s.add_argument("--hidden-out", help="also write a bundle without ground truth here")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fuse", parents=[common], help="build a TSDF volume for one scene")
    s.add_argument("--manifest", required=True)
    s.add_argument("--which", choices=("reference", "rescan"), default="reference")
    s.add_argument("--method", choices=("analytic", "depth"), default="analytic")
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--voxel-size", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    def harris_flags(s):
        s.add_argument("--k", type=float)
        s.add_argument("--min-response", type=float)
        s.add_argument("--nms-radius", type=float)

    s = sub.add_parser("keypoints", parents=[common], help="Harris keypoints of a volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True)
    harris_flags(s)
    s.set_defaults(func=cmd_keypoints)

    s = sub.add_parser("train", parents=[common], help="train the patch descriptor")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.add_argument("--stage", choices=("static", "dynamic"), default="static")
    s.add_argument("--freeze-sse", action="store_true")
    s.add_argument("--init", help="model file to continue from")
    s.add_argument("--scales", default="fine,coarse")
    s.add_argument("--split", default="train")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--margin", type=float)
    s.add_argument("--triplets-per-pair", type=int)
    harris_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("relocalize", parents=[common], help="predict poses of moved instances")
    s.add_argument("--data")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--pair", action="append", help="scan pair id (repeatable)")
    s.add_argument("--diagnostics")
    harris_flags(s)
    s.set_defaults(func=cmd_relocalize)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions")
    s.add_argument("--data")
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--table")
    s.add_argument("--split")
    s.add_argument("--name", default="method")
    s.add_argument("--distances", help="JSON {positive: [...], negative: [...]} for matching metrics")
    s.add_argument("--prc-csv")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = _read_config(args.config)
        with threadpool_limits(args.threads):
            return args.func(args, cfg)
    except (UsageError, ManifestError, ScoringError) as e:
        print(f"rio {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, OSError) as e:
        print(f"rio {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
