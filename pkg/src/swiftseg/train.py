"""Desk-scale training loop: Adam with coupled weight decay, cosine annealing
without restarts, parameter groups (reduced lr/wd for a designated namespace),
jitter-crop augmentation, and confusion-matrix mIoU."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import save
from .layers import Module
from .tensor import Tensor

IGNORE_INDEX = 255


@dataclass
class TrainConfig:
    lr_max: float = 4e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    epochs: int = 200
    batch: int = 12
    crop: int = 768
    scale_range: tuple[float, float] = (0.5, 2.0)
    pretrained_lr_divisor: float = 4.0
    pretrained_wd_divisor: float = 4.0
    seed: int = 0
    augment: bool = True
    # namespaces updated with the divided lr/wd (e.g. ("backbone.",) when the
    # encoder starts from transferred weights); empty when training from scratch
    pretrained_prefixes: tuple[str, ...] = ()
    val_interval: int = 10
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        lo, hi = self.scale_range
        if not lo < hi:
            raise ValueError("scale_range low must be below high")


def cosine_lr(t: float, total: float, cfg: TrainConfig) -> float:
    """Annealed rate at epoch t of total; no warm restarts."""
    if t < 0 or t > total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float):
    """One update over named parameters; weight decay is coupled (added to the
    gradient). ``state.step`` must be advanced by the caller once per step."""
    b1, b2 = state.beta1, state.beta2
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient dims {g.shape} do not match parameter "
                             f"{name!r} dims {p.shape}")
        if wd:
            g = g + wd * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


class Adam:
    """Adam over a model's named parameters with per-namespace lr/wd scaling."""

    def __init__(self, model: Module, cfg: TrainConfig):
        self.cfg = cfg
        self.state = AdamState()
        params = dict(model.named_parameters())
        pre = {n: p for n, p in params.items()
               if any(n.startswith(px) for px in cfg.pretrained_prefixes)}
        main = {n: p for n, p in params.items() if n not in pre}
        self.groups = [(main, 1.0, 1.0)]
        if pre:
            self.groups.append((pre, 1.0 / cfg.pretrained_lr_divisor,
                                1.0 / cfg.pretrained_wd_divisor))
        self._model = model

    def zero_grad(self):
        self._model.zero_grad()

    def step(self, lr: float):
        self.state.step += 1
        for params, lr_scale, wd_scale in self.groups:
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adam_step(params, grads, self.state, lr * lr_scale,
                      self.cfg.weight_decay * wd_scale)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize_image(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    with T.no_grad():
        return T.resize(Tensor(img[None]), oh, ow, "bilinear").data[0]


def _resize_labels(labels: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = labels.shape
    ri = np.minimum(np.floor((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), h - 1)
    ci = np.minimum(np.floor((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), w - 1)
    return labels[ri[:, None], ci[None, :]]


def augment(image: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
            rng: np.random.Generator):
    """Jittered square crop: random rescale (bilinear image / nearest labels),
    horizontal flip with p=0.5, and a crop x crop window padded with zeros and
    the ignore index where the rescaled image is smaller."""
    if image.shape[1:] != labels.shape:
        raise ValueError(f"image dims {image.shape[1:]} do not match labels {labels.shape}")
    lo, hi = cfg.scale_range
    u = rng.uniform(lo, hi)
    h, w = labels.shape
    oh, ow = max(1, round(h * u)), max(1, round(w * u))
    img = _resize_image(image, oh, ow)
    lab = _resize_labels(labels, oh, ow)
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    crop = cfg.crop
    if oh < crop or ow < crop:
        pad_img = np.zeros((image.shape[0], max(oh, crop), max(ow, crop)), dtype=img.dtype)
        pad_lab = np.full((max(oh, crop), max(ow, crop)), cfg.ignore_index, dtype=lab.dtype)
        pad_img[:, :oh, :ow] = img
        pad_lab[:oh, :ow] = lab
        img, lab = pad_img, pad_lab
        oh, ow = img.shape[1], img.shape[2]
    top = int(rng.integers(0, oh - crop + 1))
    left = int(rng.integers(0, ow - crop + 1))
    return (np.ascontiguousarray(img[:, top:top + crop, left:left + crop]),
            np.ascontiguousarray(lab[top:top + crop, left:left + crop]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    valid = truth != ignore_index
    idx = num_classes * truth[valid].astype(np.int64) + pred[valid].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou(confusion: np.ndarray):
    """(mean IoU, per-class IoU). Rows are truth, columns prediction; classes
    absent from both are excluded from the mean (IoU reported as NaN)."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError("confusion matrix must be square")
    if (confusion < 0).any():
        raise ValueError("confusion matrix counts must be non-negative")
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("all classes empty: mIoU undefined")
    iou = np.full(confusion.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return float(np.nanmean(iou)), iou


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray,
                   ignore_index: int = IGNORE_INDEX) -> float:
    valid = truth != ignore_index
    if not valid.any():
        return 0.0
    return float((pred[valid] == truth[valid]).mean())


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list
    loss_history: list
    best_miou: float
    best_checkpoint: str | None


def evaluate(model, dataset, num_classes: int, ignore_index: int = IGNORE_INDEX):
    model.train(False)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for image, labels in dataset:
        pred = model.predict(image)[0]
        conf += confusion_matrix(pred, labels, num_classes, ignore_index)
    return miou(conf)


def fit(model, dataset, cfg: TrainConfig, out_dir=None, val_dataset=None) -> TrainResult:
    """Epochs of augment -> forward -> loss -> backward -> Adam with per-step
    cosine interpolation; periodic mIoU; best checkpoint retained.

    ``dataset`` is a sequence of (image [3,H,W] float, labels [H,W] int).
    Fully deterministic for a fixed cfg.seed.
    """
    if len(dataset) == 0:
        raise ValueError("fit needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, cfg)
    val = val_dataset if val_dataset is not None else dataset
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch))
    log, loss_history = [], []
    best_miou, best_path = -1.0, None
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    try:
        for epoch in range(cfg.epochs):
            model.train(True)
            lr_epoch = cosine_lr(epoch, cfg.epochs, cfg)
            order = rng.permutation(len(dataset))
            epoch_losses = []
            for step in range(steps_per_epoch):
                picks = order[step * cfg.batch:(step + 1) * cfg.batch]
                if picks.size == 0:
                    break
                ims, labs = [], []
                for i in picks:
                    image, labels = dataset[i]
                    if cfg.augment:
                        image, labels = augment(image, labels, cfg, rng)
                    ims.append(image)
                    labs.append(labels)
                x = Tensor(np.stack(ims).astype(model.dtype))
                y = np.stack(labs)
                logits = model.forward(x)
                loss = T.softmax_cross_entropy(logits, y, cfg.ignore_index)
                opt.zero_grad()
                T.backward(loss)
                # sampled at fractional epochs: endpoint-identical, smoother
                lr_step = cosine_lr(epoch + step / steps_per_epoch, cfg.epochs, cfg)
                opt.step(lr_step)
                epoch_losses.append(float(loss.data))
            loss_history.extend(epoch_losses)
            entry = {"epoch": epoch, "lr": lr_epoch,
                     "loss": float(np.mean(epoch_losses)), "miou": None}
            if (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1:
                score, _ = evaluate(model, val, model.spec.num_classes, cfg.ignore_index)
                entry["miou"] = score
                if score > best_miou:
                    best_miou = score
                    if out_dir is not None:
                        best_path = os.path.join(out_dir, "best.swft")
                        save(model, best_path)
                model.train(True)
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
    finally:
        model.train(False)
        if log_file is not None:
            log_file.close()
    return TrainResult(log=log, loss_history=loss_history,
                       best_miou=best_miou, best_checkpoint=best_path)
