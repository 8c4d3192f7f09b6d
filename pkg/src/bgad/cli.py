"""``bgad`` command line: train, score, eval, augment, bound-report, synth.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines,
``#`` comments), ``--seed``, ``--threads`` and ``--out``; command-line
flags override the file.  Exit codes: 0 ok, 1 invalid input, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, metrics, racp
from .objective import bound_report
from .scoring import ScoringError, normalized_logps_by_label, score_dataset
from .trainer import (
    CheckpointError, TrainConfig, TrainingError, load_checkpoint, read_keyvalue, save_checkpoint,
    train,
)

log = logging.getLogger("bgad")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

PATH_KEYS = {"manifest", "checkpoint_dir", "out", "scores"}
RUN_KEYS = {"threads", "fpr_limit", "smoothing_sigma", "S", "count", "epsilon", "localization"}
ALIASES = {"lambda": "lam"}


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: Path | None = None
    checkpoint_dir: Path | None = None
    out: Path | None = None
    scores: Path | None = None
    threads: int = 1
    fpr_limit: float = 0.3
    smoothing_sigma: float = 4.0
    S: int = 3
    count: int | None = None
    epsilon: float | None = None
    localization: bool = False
    source: dict[str, str] = field(default_factory=dict)

    def echo(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.train.to_items()]
        for f in dataclasses.fields(self):
            if f.name in ("train", "source"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _bool(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "on")


def build_config(args: argparse.Namespace) -> RunConfig:
    items: dict[str, str] = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
            items = read_keyvalue(text)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"config {args.config}: {exc}") from exc
    items = {ALIASES.get(k, k): v for k, v in items.items()}
    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out}
    for name in ("manifest", "checkpoint", "scores", "epsilon", "S", "count", "fpr_limit",
                 "smoothing_sigma"):
        if getattr(args, name, None) is not None:
            overrides["checkpoint_dir" if name == "checkpoint" else name] = getattr(args, name)
    for k, v in overrides.items():
        if v is not None:
            items[k] = str(v)

    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = [k for k in items if k not in train_fields | PATH_KEYS | RUN_KEYS
               and not k.startswith("focal")]
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        tc = TrainConfig.from_items({k: v for k, v in items.items()
                                     if k in train_fields or k.startswith("focal")})
        cfg = RunConfig(train=tc, source=items)
        for k in PATH_KEYS:
            if items.get(k):
                setattr(cfg, k, Path(items[k]))
        if "threads" in items:
            cfg.threads = int(items["threads"])
        for k in ("fpr_limit", "smoothing_sigma", "epsilon"):
            if items.get(k):
                setattr(cfg, k, float(items[k]))
        for k in ("S", "count"):
            if items.get(k):
                setattr(cfg, k, int(items[k]))
        if "localization" in items:
            cfg.localization = _bool(items["localization"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad config value: {exc}") from exc
    if cfg.threads < 1:
        raise ValidationError("threads must be >= 1")
    if not 0 < cfg.fpr_limit <= 1:
        raise ValidationError("fpr_limit must lie in (0, 1]")
    if cfg.smoothing_sigma < 0:
        raise ValidationError("smoothing_sigma must be >= 0")
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ValidationError(f"missing required setting(s): {', '.join(missing)}")


def _load(cfg: RunConfig, *, localization: bool = False) -> tuple[data.Manifest, data.FeatureDataset]:
    if not cfg.manifest.is_file():
        raise ValidationError(f"manifest {cfg.manifest} not found")
    try:
        manifest = data.load_manifest(cfg.manifest)
        return manifest, data.load_dataset(manifest, localization=localization)
    except data.ManifestError as exc:
        raise ValidationError("manifest problems:\n  " + "\n  ".join(exc.problems)) from exc
    except data.FBTError as exc:
        raise ValidationError(f"feature file [{exc.code}]: {exc}") from exc


@contextmanager
def _staged(out: Path):
    """Collect outputs in a sibling temp dir; move them into ``out`` only on success."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmp.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(item, dest)
    shutil.rmtree(tmp, ignore_errors=True)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_text(path: Path, text: str) -> None:
    data.atomic_write_bytes(path, text.encode("utf-8"))


# -- subcommands ---------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "manifest", "out")
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    _, dataset = _load(cfg)
    if not any(s.label == 0 for s in dataset.samples):
        raise ValidationError("manifest has no normal samples")
    ckpt_dir = cfg.checkpoint_dir or cfg.out / "checkpoint"
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_text(cfg.out / "config_echo.txt", cfg.echo())

    ckpt = train(dataset, cfg.train)
    save_checkpoint(ckpt, ckpt_dir)
    levels = list(ckpt.models)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "ml_loss", "bgspp_loss", "lr"] + [f"raw_b_n_{lvl}" for lvl in levels])
    for row in ckpt.history:
        w.writerow([row["epoch"], _fmt(row["ml_loss"]), _fmt(row["bgspp_loss"]), _fmt(row["lr"])]
                   + [_fmt(row[f"raw_b_n_{lvl}"]) for lvl in levels])
    _write_text(cfg.out / "loss_curve.csv", buf.getvalue())
    print(f"trained {len(levels)} level(s) for {cfg.train.epochs} epochs -> {ckpt_dir}")
    return EXIT_OK


def _checkpoint(cfg: RunConfig):
    _require(cfg, "checkpoint_dir")
    try:
        return load_checkpoint(cfg.checkpoint_dir)
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from exc


def cmd_score(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint_dir", "manifest", "out")
    ckpt = _checkpoint(cfg)
    _, dataset = _load(cfg)
    try:
        result = score_dataset(ckpt, dataset, cfg.smoothing_sigma)
    except ScoringError as exc:
        raise ValidationError(str(exc)) from exc
    with _staged(cfg.out) as tmp:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label", "image_score"])
        for sid, label, score, amap in zip(result.ids, result.labels, result.image_scores, result.maps):
            w.writerow([sid, "abnormal" if label else "normal", _fmt(score)])
            data.write_fbt(tmp / "maps" / f"{sid}.fbt", amap.scores)
        _write_text(tmp / "scores.csv", buf.getvalue())
    print(f"scored {len(result.ids)} sample(s) -> {cfg.out}")
    return EXIT_OK


def evaluate(scores_dir: Path, manifest: data.Manifest, fpr_limit: float) -> tuple[dict, list]:
    """Metrics from a ``score`` output directory; returns (report, roc points)."""
    with (scores_dir / "scores.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    by_id = {r.id: r for r in manifest.records}
    problems = [f"scored id {r['id']!r} not in manifest" for r in rows if r["id"] not in by_id]
    scored = {r["id"] for r in rows}
    problems += [f"manifest id {i!r} has no score" for i in by_id if i not in scored]
    if problems:
        raise ValidationError("id mismatch:\n  " + "\n  ".join(problems))
    labels = np.array([int(by_id[r["id"]].is_abnormal) for r in rows])
    scores = np.array([float(r["image_score"]) for r in rows])
    report = {"image_auroc": metrics.auroc(scores, labels), "pixel_auroc": float("nan"),
              "pro": float("nan")}
    roc = metrics.roc_points(scores, labels)

    if any(by_id[r["id"]].mask_path for r in rows):
        maps, masks = [], []
        for r in rows:
            rec = by_id[r["id"]]
            amap = data.read_fbt(scores_dir / "maps" / f"{r['id']}.fbt").astype(np.float64)
            if rec.mask_path:
                mask = data.read_mask(manifest.resolve(rec.mask_path))
            elif rec.is_abnormal:
                raise ValidationError(f"record {rec.id!r}: abnormal record has no mask")
            else:
                mask = np.zeros(amap.shape, dtype=bool)
            if mask.shape != amap.shape:
                raise ValidationError(f"record {rec.id!r}: mask {mask.shape} vs map {amap.shape}")
            maps.append(amap)
            masks.append(mask)
        if any(m.any() for m in masks):
            report["pixel_auroc"] = metrics.pixel_auroc(maps, masks)
            report["pro"] = metrics.pro(maps, masks, fpr_limit)
    return report, roc


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "manifest", "out")
    scores_dir = cfg.scores or cfg.out
    if not (scores_dir / "scores.csv").is_file():
        raise ValidationError(f"{scores_dir}/scores.csv not found (run `bgad score` first)")
    manifest = data.load_manifest(cfg.manifest)
    try:
        data.validate_manifest(manifest, need_features=False)
    except data.ManifestError as exc:
        raise ValidationError("manifest problems:\n  " + "\n  ".join(exc.problems)) from exc
    report, roc = evaluate(scores_dir, manifest, cfg.fpr_limit)
    text = "".join(f"{k} = {_fmt(v)}\n" for k, v in report.items())
    text += f"fpr_limit = {_fmt(cfg.fpr_limit)}\n"
    roc_text = "threshold,tpr,fpr\n" + "".join(
        f"{_fmt(p.threshold)},{_fmt(p.tpr)},{_fmt(p.fpr)}\n" for p in roc)
    with _staged(cfg.out) as tmp:
        _write_text(tmp / "metrics.txt", text)
        _write_text(tmp / "roc.csv", roc_text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_augment(cfg: RunConfig) -> int:
    _require(cfg, "manifest", "out")
    manifest = data.load_manifest(cfg.manifest)
    try:
        data.validate_manifest(manifest, need_features=False, need_images=True)
    except data.ManifestError as exc:
        raise ValidationError("manifest problems:\n  " + "\n  ".join(exc.problems)) from exc
    normals = [r for r in manifest.records if not r.is_abnormal]
    abnormals = [r for r in manifest.records if r.is_abnormal]
    if not normals or not abnormals:
        raise ValidationError("augment needs at least one normal and one abnormal image")
    missing = [r.id for r in abnormals if not r.mask_path]
    if missing:
        raise ValidationError(f"abnormal records without masks: {', '.join(missing)}")
    if not 0 <= cfg.S <= len(racp.TRANSFORMS):
        raise ValidationError(f"S must lie in [0, {len(racp.TRANSFORMS)}]")
    count = cfg.count if cfg.count is not None else len(normals)
    rng = np.random.default_rng(cfg.train.seed)
    new_records = []
    with _staged(cfg.out) as tmp:
        for k in range(count):
            nrec = normals[int(rng.integers(len(normals)))]
            arec = abnormals[int(rng.integers(len(abnormals)))]
            seed = int(rng.integers(0, 2**31 - 1))
            normal = racp.RasterImage(data.read_png(manifest.resolve(nrec.image_path)), nrec.id)
            abnormal = racp.RasterImage(data.read_png(manifest.resolve(arec.image_path)), arec.id)
            region = racp.AnomalyRegion(data.read_mask(manifest.resolve(arec.mask_path)))
            try:
                img, mask = racp.racp_generate(normal, abnormal, region, cfg.S, seed)
            except (ValueError, racp.AugmentError) as exc:
                raise ValidationError(f"pair {nrec.id}/{arec.id}: {exc}") from exc
            sid = f"racp{k:05d}"
            data.write_png(tmp / "images" / f"{sid}.png", img.pixels)
            data.write_mask(tmp / "masks" / f"{sid}.png", mask.mask)
            new_records.append(data.SampleRecord(sid, "abnormal", {}, f"images/{sid}.png",
                                                 f"masks/{sid}.png"))
        root = cfg.manifest.parent.resolve()
        out_abs = cfg.out.resolve()
        old = [dataclasses.replace(
            r, image_path=os.path.relpath(root / r.image_path, out_abs) if r.image_path else None,
            mask_path=os.path.relpath(root / r.mask_path, out_abs) if r.mask_path else None,
            feature_paths={k: os.path.relpath(root / v, out_abs) for k, v in r.feature_paths.items()},
        ) for r in manifest.records]
        data.write_manifest(tmp / "manifest.csv",
                            data.Manifest(old + new_records, levels=manifest.levels))
    print(f"generated {count} composite(s) -> {cfg.out}")
    return EXIT_OK


def cmd_bound_report(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint_dir", "manifest")
    ckpt = _checkpoint(cfg)
    _, dataset = _load(cfg)
    lines = []
    lhs_all, rhs_all = [], []
    for lvl, model in ckpt.models.items():
        bd = ckpt.boundaries.get(lvl)
        if bd is None:
            raise ValidationError(f"level {lvl}: checkpoint has no boundary; run phase-2 training "
                                  "(epochs > phase1_epochs) first")
        eps = cfg.epsilon if cfg.epsilon is not None else 0.05 * (bd.b_n - bd.b_a)
        if not 0 < eps < bd.b_n - bd.b_a:
            raise ValidationError(f"epsilon {eps} outside (0, {bd.b_n - bd.b_a})")
        normal, abnormal = normalized_logps_by_label(ckpt, dataset, lvl)
        rep = bound_report(normal, abnormal, bd, eps, ckpt.config.lam, model.d)
        lines += [f"{lvl}.lhs = {_fmt(rep.lhs)}", f"{lvl}.rhs = {_fmt(rep.rhs)}",
                  f"{lvl}.slack = {_fmt(rep.slack)}"]
        lhs_all.append(rep.lhs)
        rhs_all.append(rep.rhs)
    lhs, rhs = float(np.mean(lhs_all)), float(np.mean(rhs_all))
    lines += [f"all.lhs = {_fmt(lhs)}", f"all.rhs = {_fmt(rhs)}", f"all.slack = {_fmt(rhs - lhs)}"]
    text = "\n".join(lines) + "\n"
    if cfg.out is not None:
        with _staged(cfg.out) as tmp:
            _write_text(tmp / "bound_report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "out")
    grid = None
    if args.grid:
        try:
            grid = tuple(int(v) for v in args.grid.lower().split("x"))
        except ValueError as exc:
            raise ValidationError("--grid must look like 8x8") from exc
    try:
        ds = data.synth_dataset(args.kind, args.n_normal, args.n_abnormal, args.d, cfg.train.seed,
                                grid=grid, prefix=args.prefix)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    with _staged(cfg.out) as tmp:
        data.save_dataset(ds, tmp)
    print(f"wrote {len(ds.samples)} sample(s) -> {cfg.out / 'manifest.csv'}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bgad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[common], help="two-phase training")
    sp.add_argument("--manifest")
    sp = sub.add_parser("score", parents=[common], help="anomaly maps and image scores")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--smoothing-sigma", dest="smoothing_sigma", type=float)
    sp = sub.add_parser("eval", parents=[common], help="AUROC / pixel AUROC / PRO report")
    sp.add_argument("--scores", help="directory written by `score` (default: --out)")
    sp.add_argument("--manifest")
    sp.add_argument("--fpr-limit", dest="fpr_limit", type=float)
    sp = sub.add_parser("augment", parents=[common], help="RandAugmented CutPaste composites")
    sp.add_argument("--manifest")
    sp.add_argument("-S", type=int, dest="S")
    sp.add_argument("--count", type=int)
    sp = sub.add_parser("bound-report", parents=[common], help="margin error-bound check")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--epsilon", type=float)
    sp = sub.add_parser("synth", parents=[common], help="write a synthetic feature dataset")
    sp.add_argument("--kind", default="gaussian-cluster", choices=data.SYNTH_KINDS)
    sp.add_argument("--n-normal", dest="n_normal", type=int, default=200)
    sp.add_argument("--n-abnormal", dest="n_abnormal", type=int, default=5)
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--grid", help="HxW feature grid, e.g. 8x8 (default: single vectors)")
    sp.add_argument("--prefix", default="s")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"train": cmd_train, "score": cmd_score, "eval": cmd_eval, "augment": cmd_augment,
                "bound-report": cmd_bound_report}
    try:
        cfg = build_config(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            if args.command == "synth":
                return cmd_synth(cfg, args)
            return commands[args.command](cfg)
    except ValidationError as exc:
        print(f"bgad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, ScoringError, CheckpointError, data.FBTError, racp.AugmentError,
            OSError, ValueError, FloatingPointError) as exc:
        print(f"bgad {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
