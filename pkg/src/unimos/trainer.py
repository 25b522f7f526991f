"""Training loop: supervised TAL stream plus weak / dual-strong / feature-perturbed streams."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import augment
from .augment import RngStream, StrongConfig
from .config import RunConfig, SemiConfig, TrainConfig, dump_config
from .datasets import ClassRegistry, Dataset, decode_array, encode_array, load_dataset, read_registry
from .errors import FormatError, NumericError, ValidationError
from .losses import (
    CSV_FIELDS,
    LossReport,
    PseudoLabel,
    combine_total,
    combine_unsup,
    make_pseudo_labels,
    tal_loss,
    unsup_stream_loss,
)
from .model import ModelConfig, PyramidUNet, preprocess

log = logging.getLogger(__name__)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``lr_decay`` once every ``lr_step`` epochs."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def strong_config(semi: SemiConfig) -> StrongConfig:
    return StrongConfig(p_jitter=semi.p_jitter, p_gray=semi.p_gray, p_blur=semi.p_blur, p_cutmix=semi.p_cutmix)


def model_config(cfg: RunConfig, registry: ClassRegistry) -> ModelConfig:
    m = cfg.model
    return ModelConfig(registry.num_classes, m.depth, m.width, m.size, m.feature_dropout, m.norm, m.resize, m.crop)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.RMSprop:
    return torch.optim.RMSprop(model.parameters(), lr=cfg.lr, alpha=cfg.rmsprop_alpha, eps=cfg.rmsprop_eps)


# ---------------------------------------------------------------------------
# one step


@dataclass
class UnsupViews:
    """Weak view, its pseudo-label, and two strong views with transported targets."""

    x_w: torch.Tensor
    y_w: PseudoLabel
    x_s1: torch.Tensor
    y_s1: PseudoLabel
    x_s2: torch.Tensor
    y_s2: PseudoLabel
    weak: list
    strong1: list
    strong2: list


def prepare_unsup(
    model: PyramidUNet, images: Sequence[np.ndarray], rng: RngStream, semi: SemiConfig
) -> UnsupViews:
    weak = [augment.sample_weak(rng) for _ in images]
    x_w = [augment.apply_weak(t, img) for t, img in zip(weak, images)]
    x_w_t = augment.to_tensor(x_w).to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p_w, _ = model(x_w_t)
    model.train(was_training)
    y_w = make_pseudo_labels(p_w, semi.tau)

    scfg = strong_config(semi)
    shape = x_w[0].shape
    views = {}
    for name in ("s1", "s2"):
        ts = augment.sample_strong(rng, len(x_w), shape, scfg)
        xs = augment.to_tensor(augment.apply_strong_batch(ts, x_w)).to(x_w_t.dtype)
        views[name] = (ts, xs, augment.transport_pseudo_label(y_w, ts))
    return UnsupViews(
        x_w_t, y_w, views["s1"][1], views["s1"][2], views["s2"][1], views["s2"][2], weak, views["s1"][0], views["s2"][0]
    )


def objective(
    model: PyramidUNet,
    x_l: torch.Tensor,
    y_l: torch.Tensor,
    annotated,
    views: UnsupViews | None,
    fp_seed: int,
) -> dict[str, torch.Tensor]:
    """All loss components for one step as differentiable tensors."""
    pred_l, _ = model(x_l)
    l_sup = tal_loss(pred_l, y_l, annotated)
    zero = l_sup.new_zeros(())
    if views is None:
        l_s1 = l_s2 = l_fp = zero
    else:
        # disturbed views must not shift the running statistics used for pseudo-labels and inference
        with model.frozen_norm_stats():
            l_s1 = unsup_stream_loss(model(views.x_s1)[0], views.y_s1)
            l_s2 = unsup_stream_loss(model(views.x_s2)[0], views.y_s2)
            gen = torch.Generator().manual_seed(fp_seed)
            l_fp = unsup_stream_loss(model.forward_feature_perturbed(views.x_w, generator=gen), views.y_w)
    l_u = combine_unsup(l_s1, l_s2, l_fp)
    total = combine_total(l_sup, l_u)
    return {"l_sup": l_sup, "l_s1": l_s1, "l_s2": l_s2, "l_fp": l_fp, "l_u": l_u, "total": total}


def _stats(t: torch.Tensor) -> str:
    t = t.detach().float()
    return f"shape={tuple(t.shape)} min={t.min():.4g} max={t.max():.4g} mean={t.mean():.4g} finite={bool(torch.isfinite(t).all())}"


def train_step(
    model: PyramidUNet,
    optimizer: torch.optim.Optimizer,
    x_l: torch.Tensor,
    y_l: torch.Tensor,
    annotated,
    unlabeled: Sequence[np.ndarray] | None,
    semi: SemiConfig,
    rng: RngStream,
    fp_seed: int,
    lr: float,
    step: int = 0,
    aug_log=None,
) -> LossReport:
    """One optimizer update on the combined objective; returns the step's LossReport."""
    model.train()
    views = prepare_unsup(model, unlabeled, rng, semi) if unlabeled is not None and len(unlabeled) else None
    if aug_log is not None and views is not None:
        for stream, ts in (("weak", views.weak), ("s1", views.strong1), ("s2", views.strong2)):
            for i, t in enumerate(ts):
                aug_log.write(f"{step}\t{stream}\t{i}\t{json.dumps(t.__dict__, sort_keys=True)}\n")
    try:
        losses = objective(model, x_l, y_l, annotated, views, fp_seed)
    except NumericError as exc:
        raise NumericError(
            f"step {step}: {exc} (lr={lr}; labeled {_stats(x_l)}"
            + (f"; weak view {_stats(views.x_w)}" if views is not None else "")
            + ")",
            exc.stream,
        ) from None
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    losses["total"].backward()
    optimizer.step()

    v = {k: float(t.detach()) for k, t in losses.items()}
    kept = (views.y_s1.kept_fraction, views.y_s2.kept_fraction, views.y_w.kept_fraction) if views else (0.0, 0.0, 0.0)
    # scalars recombined in double precision so the logged row satisfies the weights exactly
    l_u = combine_unsup(v["l_s1"], v["l_s2"], v["l_fp"])
    return LossReport(step, v["l_sup"], v["l_s1"], v["l_s2"], v["l_fp"], l_u, combine_total(v["l_sup"], l_u), *kept, lr)


def augment_labeled(images, labels, rng: RngStream):
    """Apply one random weak transform per labeled pair, to image and label map alike."""
    out_i, out_l = [], []
    for img, lab in zip(images, labels):
        t = augment.sample_weak(rng)
        out_i.append(augment.apply_weak(t, img))
        out_l.append(augment.apply_weak(t, lab))
    return out_i, out_l


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    registry: ClassRegistry
    labeled: list[Dataset]
    unlabeled: list[np.ndarray]


def _prepare_arrays(arrays, mcfg: ModelConfig, labels: bool):
    out = []
    for a in arrays:
        t = torch.from_numpy(np.asarray(a)[None, None].astype(np.float32))
        t = preprocess(t, mcfg.resize, mcfg.crop, mode="nearest" if labels else "bilinear")
        if t.shape[-2:] != (mcfg.size, mcfg.size):
            raise ValidationError(
                f"array of shape {tuple(t.shape[-2:])} does not match model.size {mcfg.size}; set model.resize/crop"
            )
        arr = t[0, 0].numpy()
        out.append(arr.round().astype(np.uint8) if labels else np.clip(arr, 0, 1).astype(np.float32))
    return out


def prepare_dataset(ds: Dataset, mcfg: ModelConfig) -> Dataset:
    if not (mcfg.resize or mcfg.crop):
        return ds
    labels = _prepare_arrays(ds.labels, mcfg, True) if ds.labels is not None else None
    return Dataset(ds.descriptor, _prepare_arrays(ds.images, mcfg, False), labels)


def load_train_data(cfg: RunConfig) -> TrainData:
    registry = read_registry(cfg.resolve(cfg.data.registry))
    mcfg = model_config(cfg, registry)
    if not cfg.data.labeled:
        raise ValidationError("data.labeled lists no manifests")
    labeled = []
    for path in cfg.data.labeled:
        ds = load_dataset(cfg.resolve(path), registry)
        if ds.descriptor.kind != "labeled":
            raise ValidationError(f"{path}: listed under data.labeled but kind is {ds.descriptor.kind}")
        labeled.append(prepare_dataset(ds, mcfg))
    unlabeled = []
    for path in cfg.data.unlabeled:
        ds = load_dataset(cfg.resolve(path), registry)
        unlabeled.extend(prepare_dataset(ds, mcfg).images)
    return TrainData(registry, labeled, unlabeled)


def steps_per_epoch(cfg: TrainConfig, data: TrainData) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    total = sum(len(d) for d in data.labeled)
    return max(1, math.ceil(total / cfg.batch_labeled))


@dataclass
class PlannedStep:
    dataset: int
    labeled: list[int]
    unlabeled: list[int]


def batch_plan(cfg: TrainConfig, data: TrainData, epoch: int) -> list[PlannedStep]:
    """Deterministic per-epoch schedule; each step draws from exactly one labeled dataset."""
    rng = np.random.default_rng([cfg.seed, epoch, 17])
    perms = [rng.permutation(len(d)) for d in data.labeled]
    cursors = [0] * len(perms)
    uperm = rng.permutation(len(data.unlabeled)) if data.unlabeled else np.zeros(0, dtype=int)
    ucursor = 0
    plan = []
    for j in range(steps_per_epoch(cfg, data)):
        k = j % len(perms) if cfg.cycle == "step" else epoch % len(perms)
        n = len(perms[k])
        idx = [int(perms[k][(cursors[k] + i) % n]) for i in range(min(cfg.batch_labeled, n))]
        cursors[k] += len(idx)
        uidx = []
        if len(uperm):
            m = len(uperm)
            uidx = [int(uperm[(ucursor + i) % m]) for i in range(min(cfg.batch_unlabeled, m))]
            ucursor += len(uidx)
        plan.append(PlannedStep(k, idx, uidx))
    return plan


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config_text: str
    config_hash: str
    epoch: int
    global_step: int
    train_seconds: float
    model_state: dict[str, torch.Tensor]
    optim_state: dict[int, dict[str, torch.Tensor]]
    registry: tuple[str, ...]


def _to_2d(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy().astype(np.float32)
    return a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1)


def save_checkpoint(path, model: PyramidUNet, optimizer, cfg: RunConfig, registry, epoch, global_step, train_seconds):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = {}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.ini", cfg.text or dump_config(cfg))
        for name, t in model.state_dict().items():
            shapes[f"params/{name}"] = [list(t.shape), str(t.dtype)]
            zf.writestr(f"params/{name}.ums", encode_array(_to_2d(t)))
        optim_steps = {}
        params = list(model.parameters())
        for i, p in enumerate(params):
            st = optimizer.state.get(p)
            if not st:
                continue
            optim_steps[i] = float(st["step"])
            zf.writestr(f"optim/{i}.square_avg.ums", encode_array(_to_2d(st["square_avg"])))
            shapes[f"optim/{i}.square_avg"] = [list(st["square_avg"].shape), str(st["square_avg"].dtype)]
        meta = {
            "format": "unimos-checkpoint-1",
            "epoch": epoch,
            "global_step": global_step,
            "train_seconds": train_seconds,
            "config_hash": cfg.hash,
            "registry": list(registry.names),
            "shapes": shapes,
            "optim_steps": optim_steps,
        }
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


_TORCH_DTYPES = {"torch.float32": torch.float32, "torch.float64": torch.float64, "torch.int64": torch.int64}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != "unimos-checkpoint-1":
                raise FormatError(f"{path}: not a checkpoint archive", 0)
            text = zf.read("config.ini").decode()
            arrays = {}
            for key, (shape, dtype) in meta["shapes"].items():
                arr = decode_array(zf.read(key + ".ums"))
                arrays[key] = torch.from_numpy(arr.reshape(shape)).to(_TORCH_DTYPES[dtype])
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})", 0) from None
    model_state = {k[len("params/") :]: v for k, v in arrays.items() if k.startswith("params/")}
    optim_state = {}
    for i, step in meta["optim_steps"].items():
        optim_state[int(i)] = {"step": torch.tensor(step), "square_avg": arrays[f"optim/{i}.square_avg"]}
    return Checkpoint(
        text, meta["config_hash"], meta["epoch"], meta["global_step"], meta["train_seconds"],
        model_state, optim_state, tuple(meta["registry"]),
    )


def restore(ckpt: Checkpoint, model: PyramidUNet, optimizer=None) -> None:
    model.load_state_dict(ckpt.model_state)
    if optimizer is not None:
        params = list(model.parameters())
        for i, st in ckpt.optim_state.items():
            optimizer.state[params[i]] = {"step": st["step"].clone(), "square_avg": st["square_avg"].clone()}


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PyramidUNet, RunConfig]:
    from .config import parse_config

    cfg = parse_config(ckpt.config_text)
    registry = ClassRegistry(ckpt.registry)
    model = PyramidUNet(model_config(cfg, registry))
    restore(ckpt, model)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    checkpoint: Path
    metrics: Path
    reports: list[LossReport]
    train_seconds: float
    epochs: int


def _read_metrics(path: Path) -> list[LossReport]:
    with open(path, newline="") as fh:
        return [LossReport.from_row(r) for r in csv.DictReader(fh)]


def _write_metrics(path: Path, reports: list[LossReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow(r.csv_row())
    path.write_text(buf.getvalue())


def fit(
    cfg: RunConfig,
    run_dir,
    resume=None,
    data: TrainData | None = None,
    stop_after_epoch: int | None = None,
    dump_augs=None,
    progress: bool = False,
    on_epoch=None,
) -> FitResult:
    """Train for ``cfg.train.epochs`` epochs, writing metrics.csv and checkpoints under ``run_dir``.

    ``stop_after_epoch`` ends the run early (as if interrupted) after that many epochs.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    data = data or load_train_data(cfg)
    if any(len(d) == 0 for d in data.labeled):
        raise ValidationError("a labeled dataset is empty")
    mcfg = model_config(cfg, data.registry)

    torch.manual_seed(tcfg.seed)
    model = PyramidUNet(mcfg)
    optimizer = make_optimizer(model, tcfg)
    metrics_path = run_dir / "metrics.csv"
    start_epoch, train_seconds, reports = 0, 0.0, []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.registry != data.registry.names:
            raise ValidationError(f"checkpoint registry {ckpt.registry} != data registry {data.registry.names}")
        restore(ckpt, model, optimizer)
        start_epoch, train_seconds = ckpt.epoch, ckpt.train_seconds
        if metrics_path.exists():
            reports = [r for r in _read_metrics(metrics_path) if r.step < ckpt.global_step]
        if len(reports) != ckpt.global_step:
            raise ValidationError(f"metrics.csv holds {len(reports)} rows, checkpoint expects {ckpt.global_step}")

    n_steps = steps_per_epoch(tcfg, data)
    dtype = next(model.parameters()).dtype
    aug_log = open(dump_augs, "a" if resume else "w") if dump_augs else None
    last_epoch = tcfg.epochs if stop_after_epoch is None else min(tcfg.epochs, stop_after_epoch)
    ckpt_path = None
    try:
        for epoch in range(start_epoch, last_epoch):
            t0 = time.perf_counter()
            lr = lr_at(epoch, tcfg)
            for j, ps in enumerate(batch_plan(tcfg, data, epoch)):
                ds = data.labeled[ps.dataset]
                step = epoch * n_steps + j
                images = [ds.images[i] for i in ps.labeled]
                labels = [ds.labels[i] for i in ps.labeled]
                if tcfg.augment_labeled:
                    images, labels = augment_labeled(images, labels, RngStream(derive_seed(tcfg.seed, step, 3)))
                x_l = augment.to_tensor(images).to(dtype)
                y_l = torch.from_numpy(np.stack(labels).astype(np.int64))
                unl = [data.unlabeled[i] for i in ps.unlabeled] or None
                if epoch < cfg.semi.warmup_epochs:
                    unl = None
                rep = train_step(
                    model, optimizer, x_l, y_l, ds.spec.annotated, unl, cfg.semi,
                    RngStream(derive_seed(tcfg.seed, step, 1)), derive_seed(tcfg.seed, step, 2), lr, step, aug_log,
                )
                rep.check()
                reports.append(rep)
            train_seconds += time.perf_counter() - t0
            _write_metrics(metrics_path, reports)
            done = epoch + 1
            if on_epoch is not None:
                on_epoch(done, model)
            if progress:
                last = reports[-n_steps:]
                log.info("epoch %d/%d lr=%.3g total=%.4f", done, tcfg.epochs, lr, np.mean([r.total for r in last]))
            if done % tcfg.checkpoint_every == 0 or done == tcfg.epochs:
                ckpt_path = save_checkpoint(
                    run_dir / "checkpoints" / f"epoch_{done:04d}.ckpt",
                    model, optimizer, cfg, data.registry, done, done * n_steps, train_seconds,
                )
    finally:
        if aug_log is not None:
            aug_log.close()
    if ckpt_path is None:
        ckpt_path = save_checkpoint(
            run_dir / "checkpoints" / f"epoch_{last_epoch:04d}.ckpt",
            model, optimizer, cfg, data.registry, last_epoch, last_epoch * n_steps, train_seconds,
        )
    return FitResult(ckpt_path, metrics_path, reports, train_seconds, last_epoch)
