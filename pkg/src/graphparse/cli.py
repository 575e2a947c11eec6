"""Command-line entry point: ``python -m graphparse <command> ...``.

Commands: synth, train, eval, infer, gradcheck, ablate.  Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric/verification
failure.  Settings come from ``--config FILE`` plus ``--key=value``
overrides (see :mod:`graphparse.config`).  Output files contain no
timestamps; log lines that carry one start with ``#``.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics, synthdata, trainer, verify
from .config import RunConfig
from .errors import DataError, GraphparseError, NumericError, UsageError
from .experiments import Study, StudyConfig, evaluate, format_grid
from .model import SegmentationModel
from .synthdata import Sample
from .taxonomy import LabelTaxonomy, load_embeddings, load_taxonomy

log = logging.getLogger("graphparse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def load_palette(path=None) -> Dict[str, Tuple[int, int, int]]:
    if path is None:
        text = resources.files("graphparse").joinpath("data/palette.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"palette line {lineno}: expected 'label r g b'")
        out[parts[0]] = tuple(int(v) for v in parts[1:])
    return out


def colorize(mask: np.ndarray, labels: Sequence[str], palette) -> np.ndarray:
    table = np.zeros((len(labels), 3), np.uint8)
    for i, name in enumerate(labels):
        grey = (37 * i) % 256
        table[i] = palette.get(name, (grey, grey, grey))
    return table[mask]


def _taxonomy(cfg: RunConfig) -> LabelTaxonomy:
    return load_taxonomy(cfg["data.taxonomy"] or None)


def _embeddings(cfg: RunConfig):
    return load_embeddings(cfg["data.embeddings"]) if cfg["data.embeddings"] else None


def _manifest_samples(paths: Sequence[str], taxonomy, fraction: float = 1.0) -> Dict[str, List[Sample]]:
    data: Dict[str, List[Sample]] = {}
    for path in paths:
        manifest = synthdata.load_manifest(path, taxonomy)
        recs = manifest.records[:max(1, int(round(fraction * len(manifest.records))))] \
            if manifest.records else []
        for rec in recs:
            image = synthdata.read_image(rec.image_path)
            mask = synthdata.read_mask(rec.mask_path)
            k = taxonomy.num_labels(rec.dataset_id)
            if image.shape[:2] != mask.shape:
                raise DataError(f"{rec.image_path}: image {image.shape[:2]} vs mask {mask.shape}")
            if mask.max(initial=0) >= k:
                raise DataError(f"{rec.mask_path}: label {int(mask.max())} >= {k} classes of "
                                f"{rec.dataset_id}")
            data.setdefault(rec.dataset_id, []).append(
                Sample(image, {rec.dataset_id: mask}, 0, {"path": str(rec.image_path)}))
    return data


def _stamp(out, text: str):
    out.write(f"# {time.strftime('%Y-%m-%dT%H:%M:%S')} {text}\n")


# ----------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> int:
    counts = {"train": {ds: args.count for ds in args.datasets},
              "test": {ds: args.test_count for ds in args.datasets}}
    tax = _taxonomy(cfg)
    for ds in args.datasets:
        tax.num_labels(ds)
    paths = synthdata.export_dataset(args.outdir, cfg["seed"], counts, cfg.scene_config(), tax)
    for key, p in sorted(paths.items()):
        print(f"{key}\t{p}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    tax = _taxonomy(cfg)
    if not cfg["data.train"]:
        raise UsageError("train needs data.train=<manifest>[,<manifest>...]")
    data = _manifest_samples(cfg["data.train"], tax, cfg["data.fraction"])
    if not data:
        raise DataError("training manifests contain no samples")
    mcfg = cfg.model_config()
    missing = sorted(set(data) - set(mcfg.datasets))
    if missing:
        raise UsageError(f"manifests contain {missing}, which the model does not predict "
                         f"(model.datasets={','.join(mcfg.datasets)})")
    model = SegmentationModel(mcfg, tax, _embeddings(cfg))
    if cfg["init.checkpoint"]:
        ck = trainer.load_checkpoint(cfg["init.checkpoint"], model)
        for name in ck.report.fresh:
            log.info("fresh parameter %s", name)
    tcfg = cfg.train_config()
    out = Path(args.out or cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        _stamp(fh, "train start")
        for line in cfg.lines():
            fh.write(f"# {line}\n")
        history = trainer.fit(model, data, tcfg, tax, log_file=fh)
        _stamp(fh, "train end")
    trainer.save_checkpoint(model, len(history), out / "model.grfy")
    (out / "config.txt").write_text(cfg.dump(), "utf-8")
    print(f"final loss {history[-1].loss:.6f} after {len(history)} steps; "
          f"checkpoint {out / 'model.grfy'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    tax = _taxonomy(cfg)
    ck = trainer.load_checkpoint(args.checkpoint, taxonomy=tax)
    model = ck.model
    manifests = args.manifest or list(cfg["data.test"])
    if not manifests:
        raise UsageError("eval needs --manifest or data.test")
    data = _manifest_samples(manifests, tax)
    out = Path(args.out or cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(exclude_background=cfg["eval.exclude_background"],
              f1_foreground_only=cfg["eval.f1_foreground_only"])
    for ds, samples in sorted(data.items()):
        if ds not in model.config.datasets:
            raise UsageError(f"checkpoint has no head for dataset {ds!r}")
        res = evaluate(model, samples, [ds], **kw)[ds]
        labels = tax.labels[ds]
        report = metrics.format_report(res, labels, title=f"{ds}: {len(samples)} images")
        (out / f"metrics_{ds}.txt").write_text(report, "utf-8")
        (out / f"metrics_{ds}.tsv").write_text(metrics.format_lines(res, labels), "utf-8")
        sys.stdout.write(report)
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    tax = _taxonomy(cfg)
    model = trainer.load_checkpoint(args.checkpoint, taxonomy=tax).model
    datasets = list(model.config.datasets) if args.dataset in (None, "all") else [args.dataset]
    for ds in datasets:
        if ds not in model.config.datasets:
            raise UsageError(f"checkpoint has no head for dataset {ds!r}; "
                             f"available: {', '.join(model.config.datasets)}")
    image = synthdata.read_image(args.image)
    pred = model.predict(image[None], datasets)
    palette = load_palette()
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for ds in datasets:
        mask = pred[ds][0]
        (out / f"{stem}_{ds}.pgm").write_bytes(synthdata.encode_mask(mask))
        rgb = colorize(mask, tax.labels[ds], palette).astype(np.float32) / 255.0
        (out / f"{stem}_{ds}_color.ppm").write_bytes(synthdata.encode_image(rgb))
        print(f"{ds}\t{out / f'{stem}_{ds}.pgm'}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    names = args.only or None
    for n in names or ():
        if n not in verify.CHECKS:
            raise UsageError(f"unknown check {n!r}; available: {', '.join(verify.CHECKS)}")
    results = verify.run_suite(range(args.seeds), names, args.tol,
                               echo=lambda s: print(s, flush=True))
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    if bad:
        raise NumericError(f"{len(bad)} gradient checks failed")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    seeds = tuple(range(cfg["seed"], cfg["seed"] + args.seeds))
    study = Study(StudyConfig(n_train=args.n_train, n_test=args.n_test, target=args.target,
                              source=args.source, seeds=seeds, train=cfg.train_config(),
                              backbone=cfg.backbone_config(), node_dim=cfg["model.node_dim"],
                              scene=cfg.scene_config()),
                  _taxonomy(cfg), echo=lambda s: print(s, flush=True))
    grid = study.grid(args.variants, fraction=cfg["data.fraction"])
    table = format_grid(grid, args.target)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, "utf-8")
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphparse", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--outdir", required=True)
    s.add_argument("--count", type=int, default=100, help="training images per label set")
    s.add_argument("--test-count", type=int, default=20)
    s.add_argument("--datasets", type=lambda t: t.split(","), default=["coarse", "mid", "fine"])

    s = sub.add_parser("train", help="train a model from manifests")
    s.add_argument("--out", help="output directory (default out.dir)")

    s = sub.add_parser("eval", help="score a checkpoint on manifests")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", action="append")
    s.add_argument("--out")

    s = sub.add_parser("infer", help="segment one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--dataset", help="label set, or 'all' (default)")
    s.add_argument("--outdir", default=".")

    s = sub.add_parser("gradcheck", help="finite-difference verification suite")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--only", action="append")

    s = sub.add_parser("ablate", help="component ablation grid on synthetic data")
    s.add_argument("--variants", type=lambda t: t.split(","), default=["baseline", "intra", "full"])
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-test", type=int, default=200)
    s.add_argument("--target", default="coarse")
    s.add_argument("--source", default="fine")
    s.add_argument("--out")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        known, extra = parser.parse_known_args(argv)
        if known.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if known.verbose else logging.WARNING,
                            format="# %(levelname)s %(name)s: %(message)s")
        cfg = RunConfig.resolve(known.config, extra)
        log.info("resolved config:\n%s", cfg.dump())
        return COMMANDS[known.command](known, cfg)
    except GraphparseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericError.exit_code


def main():
    sys.exit(run())
