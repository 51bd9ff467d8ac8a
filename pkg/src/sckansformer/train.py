"""Optimization harness: Adam with bias correction, per-epoch cosine
annealing, crop/flip augmentation, resize-then-crop eval preprocessing with
per-channel normalization, and the training loop with JSONL logging and a
best-by-eval-accuracy checkpoint.

Normalization statistics come from the raw train split and are applied to
both the train and eval paths, so the two pipelines feed the model from the
same input distribution.
"""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .metrics import compute_metrics, confusion
from .model import SCKansformerModel, forward
from .serialize import save_checkpoint
from .tensor import ConfigError, ContractError, Tensor, cross_entropy_with_logits, no_grad


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite; a diagnostic snapshot is on disk."""


_TRAIN_FIELDS = {
    "epochs": 100,
    "batch_size": 32,
    "lr_max": 1e-3,
    "lr_min": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "seed": 0,
    "flip_prob": 0.5,
    "pad": 4,
    "eval_resize": 40,
    "split_ratio": 0.8,
}


class TrainConfig:
    def __init__(self, **kw):
        unknown = set(kw) - set(_TRAIN_FIELDS)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        for name, default in _TRAIN_FIELDS.items():
            setattr(self, name, kw.get(name, default))
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min={self.lr_min} exceeds lr_max={self.lr_max}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics need company)")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0,1], got {self.flip_prob}")
        if self.pad < 0:
            raise ConfigError("pad must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must lie in (0,1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _TRAIN_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent named substream of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params: list, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        """One bias-corrected update from each parameter's .grad; None grads skip."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"grad shape {g.shape} != param shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    if t < 0:
        raise ContractError(f"schedule step {t} is negative")
    if total < 1:
        raise ConfigError("schedule length must be >= 1")
    if t > total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# -- image pipelines ---------------------------------------------------------


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def crop(image: np.ndarray, oy: int, ox: int, h: int, w: int) -> np.ndarray:
    if oy < 0 or ox < 0 or oy + h > image.shape[1] or ox + w > image.shape[2]:
        raise ContractError(
            f"crop [{oy}:{oy + h},{ox}:{ox + w}] leaves the {image.shape[1]}x{image.shape[2]} image"
        )
    return image[:, oy:oy + h, ox:ox + w].copy()


def augment_train(
    image: np.ndarray,
    rng: np.random.Generator,
    pad: int = 4,
    flip_prob: float = 0.5,
    crop_h: Optional[int] = None,
    crop_w: Optional[int] = None,
) -> np.ndarray:
    """Zero-pad, random crop back to target size, maybe flip horizontally."""
    _, h, w = image.shape
    th = crop_h if crop_h is not None else h
    tw = crop_w if crop_w is not None else w
    if pad > 0:
        image = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    if image.shape[1] < th or image.shape[2] < tw:
        raise ContractError(
            f"{image.shape[1]}x{image.shape[2]} source cannot yield a {th}x{tw} crop"
        )
    oy = int(rng.integers(0, image.shape[1] - th + 1))
    ox = int(rng.integers(0, image.shape[2] - tw + 1))
    out = crop(image, oy, ox, th, tw)
    # always consume the flip draw so the stream stays aligned across flip_prob values
    if rng.random() < flip_prob:
        out = hflip(out)
    return out


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear with endpoints pinned to the source corners."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target {out_h}x{out_w} is empty")
    _, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()

    def interp(arr: np.ndarray, src: int, dst: int, axis: int) -> np.ndarray:
        if src == 1:
            reps = [1] * arr.ndim
            reps[axis] = dst
            return np.tile(arr, reps)
        pos = np.linspace(0.0, src - 1.0, dst) if dst > 1 else np.array([(src - 1) / 2.0])
        lo = np.floor(pos).astype(np.int64)
        lo = np.minimum(lo, src - 2)
        frac = pos - lo
        shape = [1] * arr.ndim
        shape[axis] = dst
        frac = frac.reshape(shape)
        a = np.take(arr, lo, axis=axis)
        b = np.take(arr, lo + 1, axis=axis)
        return a * (1.0 - frac) + b * frac

    return interp(interp(image, h, out_h, axis=1), w, out_w, axis=2)


def center_crop(image: np.ndarray, th: int, tw: int) -> np.ndarray:
    _, h, w = image.shape
    if h < th or w < tw:
        raise ContractError(f"cannot center-crop {h}x{w} to {th}x{tw}")
    return crop(image, (h - th) // 2, (w - tw) // 2, th, tw)


def channel_stats(x: np.ndarray) -> tuple:
    """Per-channel mean/std over a [N,C,H,W] stack; std floored at 1e-6."""
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), 1e-6)
    return mean, std


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Per-channel shift/scale for [C,H,W] or [N,C,H,W] input."""
    if x.ndim not in (3, 4):
        raise ContractError(f"expected [C,H,W] or [N,C,H,W], got rank {x.ndim}")
    view = (x.ndim - 3) * (1,) + (-1, 1, 1)
    return (x - np.asarray(mean).reshape(view)) / np.asarray(std).reshape(view)


def preprocess_eval(
    image: np.ndarray,
    resize: int,
    crop_size: int,
    mean: Optional[np.ndarray] = None,
    std: Optional[np.ndarray] = None,
) -> np.ndarray:
    out = center_crop(bilinear_resize(image, resize, resize), crop_size, crop_size)
    if mean is not None:
        out = normalize(out, mean, std)
    return out


# -- loop --------------------------------------------------------------------


def _epoch_order(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def _batches(order: np.ndarray, batch_size: int) -> list:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a lone trailing sample would starve batch statistics; fold it back
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def predict_labels(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)


def forward_in_chunks(model: SCKansformerModel, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(forward(Tensor(x[i:i + batch_size]), model, train=False).data)
    return np.concatenate(outs, axis=0)


def evaluate(model: SCKansformerModel, x: np.ndarray, y: np.ndarray,
             num_classes: int, batch_size: int = 64) -> tuple:
    logits = forward_in_chunks(model, x, batch_size)
    cm = confusion(y, predict_labels(logits), num_classes)
    return cm, compute_metrics(cm)


def _checkpoint_config(model: SCKansformerModel, cfg: TrainConfig, class_names, mean, std) -> dict:
    return {
        "model": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "class_names": list(class_names),
        "norm_mean": [float(v) for v in mean],
        "norm_std": [float(v) for v in std],
    }


def train_loop(
    model: SCKansformerModel,
    train_ds: Dataset,
    eval_ds: Dataset,
    cfg: TrainConfig,
    out_dir,
    stop_at_train_acc: Optional[float] = None,
) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(train_ds) < 2:
        raise ContractError("training needs at least two samples")
    x_train, y_train = train_ds.as_arrays()
    x_eval_raw, y_eval = eval_ds.as_arrays()
    k = model.cfg.num_classes
    if int(y_train.max()) >= k or int(y_eval.max()) >= k:
        raise ContractError("dataset labels exceed the model's class count")
    mean, std = channel_stats(x_train)
    target = model.cfg.image_h
    x_eval = np.stack([
        preprocess_eval(img, cfg.eval_resize, target, mean, std) for img in x_eval_raw
    ])

    shuffle_rng = rng_for(cfg.seed, "shuffle")
    augment_rng = rng_for(cfg.seed, "augment")
    opt = Adam(model.parameters(), beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    log_path = out_dir / "log.jsonl"
    ckpt_path = out_dir / "checkpoint"
    best_acc, best_epoch = -1.0, -1
    schedule_span = max(cfg.epochs - 1, 1)
    epochs_run = 0

    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, schedule_span, cfg.lr_max, cfg.lr_min)
            order = _epoch_order(shuffle_rng, len(train_ds))
            loss_sum, hit_sum = 0.0, 0
            for batch in _batches(order, cfg.batch_size):
                xb = np.stack([
                    augment_train(x_train[i], augment_rng, pad=cfg.pad, flip_prob=cfg.flip_prob)
                    for i in batch
                ])
                xb = normalize(xb, mean, std)
                yb = y_train[batch]
                logits = forward(Tensor(xb), model, train=True)
                loss = cross_entropy_with_logits(logits, yb)
                if not np.isfinite(loss.data):
                    _snapshot_divergence(out_dir, model, cfg, train_ds.class_names,
                                         mean, std, epoch, float(loss.data))
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}; diagnostic written to {out_dir}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                loss_sum += float(loss.data) * len(batch)
                hit_sum += int((predict_labels(logits.data) == yb).sum())
            train_loss = loss_sum / len(train_ds)
            train_acc = hit_sum / len(train_ds)
            _, report = evaluate(model, x_eval, y_eval, k, cfg.batch_size)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "eval_precision": report["macro_precision"],
                "eval_recall": report["macro_recall"],
                "eval_f1": report["macro_f1"],
                "eval_acc": report["accuracy"],
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            epochs_run = epoch + 1
            if report["accuracy"] > best_acc:
                best_acc, best_epoch = report["accuracy"], epoch
                save_checkpoint(
                    ckpt_path,
                    model.state_tensors(),
                    config=_checkpoint_config(model, cfg, train_ds.class_names, mean, std),
                )
            if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
                break
    return {
        "epochs_run": epochs_run,
        "best_eval_acc": best_acc,
        "best_epoch": best_epoch,
        "final_train_acc": train_acc,
        "final_train_loss": train_loss,
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
    }


def _snapshot_divergence(out_dir: Path, model, cfg, class_names, mean, std,
                         epoch: int, loss: float) -> None:
    save_checkpoint(
        out_dir / "diagnostic",
        model.state_tensors(),
        config=_checkpoint_config(model, cfg, class_names, mean, std),
    )
    (out_dir / "diagnostic.json").write_text(
        json.dumps({"epoch": epoch, "loss": repr(loss)}, sort_keys=True) + "\n"
    )
