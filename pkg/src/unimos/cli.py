"""Command line entry point: ``unimos {gen-data,train,eval,predict,grad-check}``.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash, load_config
from .datasets import (
    ClassRegistry,
    PartialLabelSpec,
    default_phantom_spec,
    generate_phantom,
    load_dataset,
    read_array,
    read_registry,
    restrict_labels,
    write_array,
    write_dataset,
    write_registry,
)
from .errors import NumericError, ValidationError

log = logging.getLogger("unimos")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    seed: int
    started: str
    finished: str | None = None
    status: str = "running"
    artifacts: dict[str, str] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    def finish(self, path: Path, status: str = "ok") -> None:
        self.finished = _now()
        self.status = status
        self.write(path)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _start_manifest(command: str, text: str, seed: int, directory: Path) -> tuple[RunManifest, Path]:
    digest = config_hash(text)
    manifest = RunManifest(f"{command}-{digest[:10]}-{uuid.uuid4().hex[:8]}", command, digest, seed, _now())
    path = directory / "run_manifest.json"
    manifest.write(path)
    return manifest, path


# ---------------------------------------------------------------------------
# gen-data


def desk_splits(cfg: RunConfig):
    """Phantom pool split into single-organ labeled sets, an unlabeled set and a full eval set."""
    p = cfg.phantom
    registry = ClassRegistry(p.classes)
    if registry.names != ("liver", "kidney", "spleen"):
        raise ValidationError("phantom.classes: the built-in phantom describes liver,kidney,spleen in that order")
    n_lab = p.labeled_per_dataset * registry.num_foreground
    total = n_lab + p.unlabeled + p.eval
    spec = default_phantom_spec(p.size, count=total, seed=p.seed, noise_std=p.noise_std)
    pairs = generate_phantom(spec, registry)
    splits = {}
    for k, name in enumerate(registry.names, start=1):
        part = PartialLabelSpec(frozenset({k}))
        chunk = pairs[(k - 1) * p.labeled_per_dataset : k * p.labeled_per_dataset]
        splits[name] = ([img for img, _ in chunk], [restrict_labels(lab, part) for _, lab in chunk], part)
    chunk = pairs[n_lab : n_lab + p.unlabeled]
    splits["unlabeled"] = ([img for img, _ in chunk], None, None)
    chunk = pairs[n_lab + p.unlabeled :]
    splits["eval"] = ([img for img, _ in chunk], [lab for _, lab in chunk], PartialLabelSpec.full(registry))
    return registry, splits


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            log.error("output directory %s is not empty; pass --force to regenerate", out)
            return EXIT_CONFIG
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, mpath = _start_manifest("gen-data", cfg.text, cfg.phantom.seed, out)
    registry, splits = desk_splits(cfg)
    write_registry(out / "registry.txt", registry)
    manifest.artifacts["registry"] = "registry.txt"
    for name, (images, labels, spec) in splits.items():
        if not images:
            continue
        path = write_dataset(out / name, name, images, labels, registry, spec)
        manifest.artifacts[name] = str(path.relative_to(out))
        log.info("wrote %s (%d images)", path, len(images))
    manifest.finish(mpath)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .trainer import fit, load_checkpoint

    cfg = load_config(args.config)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config_hash != cfg.hash and not args.allow_config_drift:
            log.error(
                "config hash %s differs from checkpoint's %s; pass --allow-config-drift to resume anyway",
                cfg.hash[:12], ckpt.config_hash[:12],
            )
            return EXIT_CONFIG
    (run_dir / "config.ini").write_text(cfg.text)
    manifest, mpath = _start_manifest("train", cfg.text, cfg.train.seed, run_dir)
    manifest.artifacts.update(config="config.ini", metrics="metrics.csv")
    try:
        result = fit(cfg, run_dir, resume=args.resume, dump_augs=args.dump_augs, progress=True)
    except BaseException:
        manifest.finish(mpath, "failed")
        raise
    manifest.artifacts["checkpoint"] = os.path.relpath(result.checkpoint, run_dir)
    manifest.finish(mpath)
    log.info("finished %d epochs, %.2f min/epoch; checkpoint %s", result.epochs,
             result.train_seconds / 60 / max(result.epochs, 1), result.checkpoint)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / predict


def _find_registry(manifest: Path) -> Path | None:
    for parent in list(manifest.resolve().parents)[:3]:
        if (parent / "registry.txt").is_file():
            return parent / "registry.txt"
    return None


def _checked_registry(ckpt, registry_path) -> ClassRegistry:
    ck_reg = ClassRegistry(ckpt.registry)
    if registry_path is None:
        return ck_reg
    reg = read_registry(registry_path)
    if reg.num_classes != ck_reg.num_classes or reg.names != ck_reg.names:
        raise ValidationError(
            f"checkpoint predicts {ck_reg.num_classes} classes {list(ck_reg.names)} but registry {registry_path} "
            f"has {reg.num_classes}: {list(reg.names)}"
        )
    return reg


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .trainer import load_checkpoint, model_config, model_from_checkpoint, prepare_dataset

    ckpt = load_checkpoint(args.ckpt)
    data = Path(args.data)
    registry = _checked_registry(ckpt, args.registry or _find_registry(data))
    model, cfg = model_from_checkpoint(ckpt)
    dataset = prepare_dataset(load_dataset(data, registry), model_config(cfg, registry))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, mpath = _start_manifest("eval", ckpt.config_text, cfg.train.seed, out)
    train_min = ckpt.train_seconds / 60 / ckpt.epoch if ckpt.epoch else None
    report = evaluate(model, dataset, registry, aggregate=args.aggregate, train_min_per_epoch=train_min)
    (out / "dice.csv").write_text(report.to_csv())
    table = report.table()
    (out / "table.txt").write_text(table)
    manifest.artifacts.update(csv="dice.csv", table="table.txt")
    manifest.finish(mpath)
    print(table, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    import torch

    from .evaluation import model_predictor
    from .model import preprocess
    from .trainer import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    _checked_registry(ckpt, args.registry)
    model, cfg = model_from_checkpoint(ckpt)
    image = read_array(args.image)
    if image.dtype != np.float32:
        raise ValidationError(f"{args.image}: expected an image container")
    x = preprocess(torch.from_numpy(image)[None, None], cfg.model.resize, cfg.model.crop)[0, 0].numpy()
    labels = model_predictor(model)(x)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_array(out, labels)
    manifest, mpath = _start_manifest("predict", ckpt.config_text, cfg.train.seed, out.parent)
    manifest.artifacts["labels"] = out.name
    manifest.finish(mpath)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    from . import gradcheck

    seed = 0
    text = ""
    if args.config:
        cfg = load_config(args.config)
        seed, text = cfg.train.seed, cfg.text
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest, mpath = _start_manifest("grad-check", text, seed, out)
    results = gradcheck.run(args.precision, sabotage=args.sabotage, seed=seed)
    lines = [f"{'component':<20} {'max_rel_error':>14} {'threshold':>10}  result"]
    for r in results:
        lines.append(f"{r.component:<20} {r.max_rel_error:>14.3e} {r.threshold:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.component for r in results if not r.passed]
    lines.append(f"precision={args.precision}: " + ("all components pass" if not failed else "FAILED: " + ", ".join(failed)))
    print("\n".join(lines))
    if out is not None:
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        manifest.artifacts["report"] = "gradcheck.txt"
        manifest.finish(mpath, "failed" if failed else "ok")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unimos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantom datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--allow-config-drift", action="store_true")
    p.add_argument("--dump-augs", help="write every sampled transform record to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice report on a fully labeled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest of the evaluation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--registry")
    p.add_argument("--aggregate", choices=("global", "per_image"), default="global")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="argmax label map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--precision", choices=("double", "single"), default="double")
    p.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
