"""Command-line entry point: ``hdrvqa <command> ...``.

Every command that writes a directory leaves the resolved config and its
hash there. Failures are reported as one ``ERROR <CODE>: <detail>`` line on
stderr with exit status 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hdrvqa import __version__
from hdrvqa.errors import CheckpointNotFound, ConfigError, HdrVqaError

log = logging.getLogger("hdrvqa")

RAW_SUFFIXES = (".yuv", ".rgb", ".raw")


# ---------------------------------------------------------------------------
# config helpers


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except HdrVqaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _read_json(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return data


def _snapshot(out: Path, config: dict) -> str:
    from hdrvqa.head import config_hash

    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    (out / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True, default=str) + "\n")
    (out / "config.hash").write_text(digest + "\n")
    return digest


def _config_hash(config: dict) -> str:
    from hdrvqa.head import config_hash

    return config_hash(config)


def _input_hashes(*paths) -> dict:
    from hdrvqa.contrastive.models import file_hash

    return {str(p): file_hash(p) for p in paths if p is not None and Path(p).is_file()}


def _previous_hash(out: Path) -> str | None:
    p = out / "config.hash"
    return p.read_text().strip() if p.exists() else None


def _tsv(rows: list[list], path: Path | None = None) -> None:
    lines = ["\t".join(str(c) for c in r) for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if path is not None:
        path.write_text(text)


def _raw_inputs(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in RAW_SUFFIXES))
        else:
            out.append(p)
    if not out:
        raise ConfigError("no raw video files given")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_forge(args) -> int:
    from hdrvqa.ladder import EncoderContract, forge, load_ladder, read_sources

    cfg = _read_json(args.encoder, {f.name for f in dataclasses.fields(EncoderContract)})
    encoder = EncoderContract.from_dict(cfg)
    sources = read_sources(args.sources)
    ladder = load_ladder(args.ladder)
    out = Path(args.out)
    config = {"sources": [dataclasses.asdict(s) for s in sources], "ladder": [dataclasses.asdict(r) for r in ladder],
              "seed": args.seed, "encoder": dataclasses.asdict(encoder),
              "inputs": _input_hashes(args.sources, args.ladder if args.ladder != "default" else None)}
    if args.resume and _previous_hash(out) not in (None, _config_hash(config)):
        raise ConfigError(f"{out} was forged with a different config; refusing to resume")
    _snapshot(out, config)
    manifest = forge(sources, ladder, args.seed, out, encoder, workers=args.workers, resume=args.resume)
    rows = [["clip_id", "class", "width", "height", "target_kbps", "achieved_kbps", "warnings"]]
    for c in manifest.clips:
        rows.append([c.clip_id, c.distortion_class, c.width, c.height, c.target_bitrate_kbps or "",
                     "" if c.achieved_bitrate_kbps is None else f"{c.achieved_bitrate_kbps:.0f}",
                     "; ".join(c.warnings)])
    _tsv(rows, out / "clips.tsv")
    return 0


def _training_frames(args):
    """(frames, groups, manifest_hash) from a manifest, a directory of raw frames, or the toy corpus."""
    from hdrvqa.features import frame_rgb
    from hdrvqa.media import load_frames, read_geometry, sidecar_path

    if args.toy:
        from hdrvqa.synthetic import TOY_BASE_STEP, make_corpus

        corpus = make_corpus(args.toy_contents, args.toy_size, seed=0, base_step=TOY_BASE_STEP)
        return list(corpus.frames), list(corpus.contents), "toy"
    if args.manifest:
        from hdrvqa.ladder import CorpusManifest, EncoderContract, sample_training_frame

        manifest = CorpusManifest.load(args.manifest)
        allowed = {f.name for f in dataclasses.fields(EncoderContract)}
        encoder = EncoderContract.from_dict(_read_json(args.encoder, allowed))
        work = Path(args.out) / "frames"
        work.mkdir(parents=True, exist_ok=True)
        frames = [frame_rgb(sample_training_frame(c, manifest.global_seed, encoder, work)) for c in manifest.clips]
        return frames, [c.source_id for c in manifest.clips], manifest.content_hash()
    files = _raw_inputs(args.frames)
    frames = [frame_rgb(load_frames(f, read_geometry(sidecar_path(f)), [0])[0]) for f in files]
    return frames, [f.stem for f in files], None


def cmd_finetune(args) -> int:
    from hdrvqa.contrastive import ModelConfig, TrainConfig, finetune, init_model
    from hdrvqa.plotting import loss_curve

    raw = _read_json(args.config, {"model", "train"})
    model_cfg = _strict(ModelConfig, raw.get("model", {}), "model")
    train_raw = dict(raw.get("train", {}))
    if args.epochs is not None:
        train_raw["epochs"] = args.epochs
    train_cfg = _strict(TrainConfig, train_raw, "train")
    out = Path(args.out)
    config = {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg),
              "inputs": {"manifest": _input_hashes(args.manifest) if args.manifest else None,
                         "frames": args.frames, "toy": [args.toy_contents, args.toy_size] if args.toy else None}}
    if args.resume and (out / "final.pt").exists() and _previous_hash(out) == _config_hash(config):
        print(f"final.pt\t{out / 'final.pt'}\t(up to date)")
        return 0
    _snapshot(out, config)
    frames, groups, manifest_hash = _training_frames(args)
    model = init_model(model_cfg, seed=train_cfg.seed)
    _, history = finetune(frames, model, train_cfg, out_dir=out, manifest_hash=manifest_hash, groups=groups,
                          on_epoch=lambda r: print(f"epoch\t{r['epoch']}\tloss\t{r['loss']:.6f}\tlr\t{r['lr']:.6g}",
                                                   flush=True))
    if history:
        loss_curve(history, out / "loss.png")
    print(f"final.pt\t{out / 'final.pt'}")
    return 0


def cmd_extract(args) -> int:
    from hdrvqa.contrastive import load_checkpoint
    from hdrvqa.features import export_csv, extract_video, load_features, save_features
    from hdrvqa.media import read_geometry, sidecar_path

    model, meta = load_checkpoint(args.ckpt)
    files = _raw_inputs(args.videos)
    bank_path = Path(args.out)
    existing = {}
    if args.resume and bank_path.exists():
        existing = {f.video_id: f for f in load_features(bank_path) if f.checkpoint_hash == meta["hash"]}
    features = []
    for f in files:
        vid = f.stem
        if vid in existing:
            features.append(existing[vid])
            continue
        features.append(extract_video(f, read_geometry(sidecar_path(f)), model, args.stride, vid, meta["hash"],
                                      args.crop))
        print(f"extracted\t{vid}\t{features[-1].n_frames_pooled}", flush=True)
    save_features(bank_path, features)
    stamp = {"checkpoint": str(args.ckpt), "checkpoint_hash": meta["hash"], "stride": args.stride,
             "crop": args.crop, "videos": _input_hashes(*files)}
    Path(str(bank_path) + ".config.json").write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")
    if args.csv:
        export_csv(args.csv, features)
    print(f"bank\t{bank_path}\t{len(features)}")
    return 0


def cmd_evaluate(args) -> int:
    from hdrvqa.features import load_features
    from hdrvqa.head import (RegressorSpec, config_hash, cv_fit, design_matrix, read_labels, report_body,
                             run_protocol, save_head, spec_to_dict, trial_predictions)
    from hdrvqa.metrics import logistic_fit
    from hdrvqa.plotting import trial_summary

    regressor_keys = ("C_grid", "epsilon_grid", "standardize")
    defaults = {"trials": 100, "seed": 0, "ratio": 0.8, "folds": 5, "offset_in_denominator": False, "mode": "NR"}
    raw = _read_json(args.config, set(regressor_keys) | set(defaults))
    spec = _strict(RegressorSpec, {k: raw[k] for k in regressor_keys if k in raw}, "regressor")
    opts = {k: raw.get(k, v) for k, v in defaults.items()}
    for key in ("trials", "seed", "mode"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    out = Path(args.out)
    config = {"regressor": spec_to_dict(spec), **opts, "inputs": _input_hashes(args.bank, args.labels)}
    if args.resume and (out / "report.json").exists() and _previous_hash(out) == _config_hash(config):
        sys.stdout.write((out / "summary.tsv").read_text())
        return 0
    bank = load_features(args.bank)
    labels = read_labels(args.labels)
    _snapshot(out, config)
    result = run_protocol(bank, labels, spec, workers=args.workers, **opts)
    (out / "report.json").write_text(report_body(result, config))

    rows = [["trial", "srocc", "lcc", "rmse", "C", "epsilon", "converged"]]
    for tid, t, sel in zip(result.trial_ids, result.report.per_trial, result.selected):
        rows.append([tid, f"{t.srocc:.6f}", f"{t.lcc:.6f}", f"{t.rmse:.6f}", f"{sel['C']:g}",
                     f"{sel['epsilon']:.6g}", int(t.converged)])
    (out / "trials.tsv").write_text("\n".join("\t".join(map(str, r)) for r in rows) + "\n")
    r = result.report
    _tsv([["metric", "median", "std"],
          ["SROCC", f"{r.median_srocc:.4f}", f"{r.std_srocc:.4f}"],
          ["LCC", f"{r.median_lcc:.4f}", f"{r.std_lcc:.4f}"],
          ["RMSE", f"{r.median_rmse:.4f}", f"{r.std_rmse:.4f}"],
          ["trials", len(result.trial_ids), len(result.excluded)]], out / "summary.tsv")

    first = trial_predictions(bank, labels, spec, trials=1, mode=opts["mode"], seed=opts["seed"],
                              ratio=opts["ratio"], folds=opts["folds"])[0]
    curve = logistic_fit(first.predictions, first.scores, offset_in_denominator=opts["offset_in_denominator"]) \
        if np.ptp(first.predictions) > 0 else None
    trial_summary(r.per_trial, first.predictions, first.scores, curve, out / "evaluation.png")

    if args.head_out:
        X = design_matrix(bank, labels, opts["mode"])
        head = cv_fit(X, [lab.score for lab in labels], spec, opts["folds"], opts["seed"],
                      groups=[lab.content_id for lab in labels])
        head.mode = opts["mode"].upper()
        save_head(args.head_out, head)
        print(f"head\t{args.head_out}\tC={head.C:g}\tepsilon={head.epsilon:.4g}\tconfig={config_hash(config)}")
    return 0


def cmd_predict(args) -> int:
    from hdrvqa.contrastive import load_checkpoint
    from hdrvqa.features import extract_video
    from hdrvqa.head import fr_feature, load_head, predict
    from hdrvqa.media import read_geometry, sidecar_path

    if not Path(args.head).is_file():
        raise CheckpointNotFound(f"quality head not found: {args.head}")
    model, meta = load_checkpoint(args.ckpt)
    head = load_head(args.head)

    def describe(path):
        p = Path(path)
        return extract_video(p, read_geometry(sidecar_path(p)), model, args.stride, p.stem, meta["hash"], args.crop)

    feat = describe(args.video)
    mode = getattr(head, "mode", "NR")
    if mode == "FR":
        if not args.ref:
            raise ConfigError("this quality head was trained on full-reference features; pass --ref")
        x = fr_feature(describe(args.ref), feat)
    else:
        x = feat.vector
    score = float(predict(head, x[None])[0])
    print(f"{feat.video_id}\t{score:.6f}")
    return 0


def cmd_ablate(args) -> int:
    from hdrvqa.contrastive import ModelConfig, init_model
    from hdrvqa.plotting import ablation_bars
    from hdrvqa.synthetic import TOY_BASE_STEP, make_corpus, toy_probe

    if args.axis == "epochs":
        try:
            values = [int(v) for v in args.values]
        except ValueError as exc:
            raise ConfigError(f"epoch values must be integers: {args.values}") from exc
        if any(v < 0 for v in values):
            raise ConfigError("epoch values must be non-negative")
    else:
        aliases = {"sdr-pretrained": "sdr-pretrained-checkpoint"}
        values = [aliases.get(v, v) for v in args.values]
        bad = [v for v in values if v not in ("random", "sdr-pretrained-checkpoint")]
        if bad:
            raise ConfigError(f"init values must be 'random' or 'sdr-pretrained-checkpoint', got {bad}")
        if "sdr-pretrained-checkpoint" in values and not args.init_path:
            raise ConfigError("the sdr-pretrained-checkpoint arm needs --init-path")
        if args.init_path and not Path(args.init_path).is_file():
            raise CheckpointNotFound(f"checkpoint not found: {args.init_path}")

    out = Path(args.out)
    config = {"axis": args.axis, "values": values, "seeds": args.seeds, "epochs": args.epochs,
              "n_contents": args.toy_contents, "size": args.toy_size, "init_path": args.init_path}
    _snapshot(out, config)
    corpus = make_corpus(args.toy_contents, args.toy_size, seed=0, base_step=TOY_BASE_STEP)
    rows = [["value", "seed", "accuracy", "final_loss"]]
    table = [[args.axis, "probe_accuracy", "std", "seeds"]]
    means = []
    for v in values:
        accs = []
        for seed in range(args.seeds):
            if args.axis == "epochs":
                acc, hist = toy_probe(corpus, v, seed)
            else:
                mc = ModelConfig("toy-cnn", weights_init=v,
                                 init_path=args.init_path if v != "random" else None)
                acc, hist = toy_probe(corpus, args.epochs, seed, model=init_model(mc, seed))
            accs.append(acc)
            rows.append([v, seed, f"{acc:.4f}", f"{hist[-1]['loss']:.4f}" if hist else ""])
            log.info("%s=%s seed %d: accuracy %.4f", args.axis, v, seed, acc)
        means.append(float(np.mean(accs)))
        table.append([v, f"{means[-1]:.4f}", f"{np.std(accs, ddof=1) if len(accs) > 1 else 0.0:.4f}", len(accs)])
    (out / "ablation_runs.tsv").write_text("\n".join("\t".join(map(str, r)) for r in rows) + "\n")
    _tsv(table, out / "ablation.tsv")
    ablation_bars(args.axis, values, means, out / "ablation.png", chance=1.0 / len(np.unique(corpus.classes)))
    return 0


# ---------------------------------------------------------------------------
# parser


def _version_text() -> str:
    from hdrvqa.contrastive.models import CHECKPOINT_FORMAT
    from hdrvqa.features import BANK_SCHEMA_VERSION
    from hdrvqa.ladder import MANIFEST_SCHEMA_VERSION

    return (f"hdrvqa {__version__} (feature bank schema {BANK_SCHEMA_VERSION}, "
            f"checkpoint format {CHECKPOINT_FORMAT}, manifest schema {MANIFEST_SCHEMA_VERSION})")


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest, **kwargs):
        super().__init__(option_strings, dest, nargs=0, help="print package and file-format versions")

    def __call__(self, parser, namespace, values, option_string=None):
        print(_version_text())
        parser.exit()


def _add_toy(p):
    p.add_argument("--toy-contents", type=int, default=50, help="synthetic contents (10 frames each)")
    p.add_argument("--toy-size", type=int, default=64, help="synthetic frame side in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrvqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action=_VersionAction)
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="cut clips from sources and run them down the bitrate ladder")
    p.add_argument("--sources", required=True, help="JSON or CSV list of source videos")
    p.add_argument("--out", required=True)
    p.add_argument("--ladder", default="default", help="JSON list of rungs, or 'default'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoder", help="JSON overriding the encoder command templates")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("finetune", help="contrastive fine-tuning of the encoder")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="corpus manifest written by forge")
    src.add_argument("--frames", nargs="+", help="raw frame files or directories (JSON sidecars required)")
    src.add_argument("--toy", action="store_true", help="train on the synthetic ladder corpus")
    p.add_argument("--config", help='JSON {"model": {...}, "train": {...}}')
    p.add_argument("--encoder", help="encoder templates used to decode manifest frames")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="skip if a finished run with the same config exists")
    _add_toy(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("extract", help="pooled video features into a feature bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--videos", nargs="+", required=True, help="raw video files or directories")
    p.add_argument("--out", required=True, help="feature bank path")
    p.add_argument("--stride", type=int, default=1, help="use every n-th frame")
    p.add_argument("--crop", type=int, help="centre crop side instead of the full frame")
    p.add_argument("--csv", help="also export the bank as CSV")
    p.add_argument("--resume", action="store_true", help="keep videos already in the bank")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="repeated content-disjoint SVR evaluation")
    p.add_argument("--bank", required=True)
    p.add_argument("--labels", required=True, help="CSV: video_id, content_id, score[, reference_id]")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with regressor grids and protocol options")
    p.add_argument("--mode", choices=["NR", "FR"])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--head-out", help="also fit a head on all labels and save it here")
    p.add_argument("--resume", action="store_true", help="skip if a report with the same config and inputs exists")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="quality score of one raw video")
    p.add_argument("--video", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--ref", help="pristine reference, for full-reference heads")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--crop", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="probe accuracy across fine-tuning epochs or initialisations")
    p.add_argument("--axis", required=True, choices=["epochs", "init"])
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10, help="fine-tuning epochs for the init axis")
    p.add_argument("--init-path", help="pretrained encoder for the sdr-pretrained-checkpoint arm")
    _add_toy(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HdrVqaError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"ERROR NOT_FOUND: {exc}", file=sys.stderr)
    except (ValueError, KeyError) as exc:
        print(f"ERROR BAD_INPUT: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
