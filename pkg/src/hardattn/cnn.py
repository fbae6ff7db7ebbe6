"""Full-image CNN: the upper-bound baseline and the common yardstick for comparing policies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import Split, normalize
from .perception import GlimpseGrid
from .tensor import engine as E
from .tensor.checkpoint import load_into, read_checkpoint, save_checkpoint, state_dict
from .tensor.engine import Tensor
from .tensor.nn import BatchNorm, Conv2d, Linear, Module, ModuleList
from .tensor.optim import Adam, OptimConfig, plateau_schedule
from .tensor.rng import substream
from .training import augment, ce_loss


class FullImageCNN(Module):
    """Conv blocks BN(LeakyReLU(Conv k=3)) halving the resolution, global max pool, linear head."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator,
                 widths=(32, 64, 64, 128), slope: float = 0.01):
        super().__init__()
        self.slope = slope
        self.widths = tuple(int(w) for w in widths)
        convs, norms = [], []
        cin = channels
        for i, w in enumerate(widths):
            convs.append(Conv2d(cin, w, 3, rng, stride=1 if i == 0 else 2, padding=1))
            norms.append(BatchNorm(w))
            cin = w
        self.convs, self.norms = ModuleList(convs), ModuleList(norms)
        self.head = Linear(cin, num_classes, rng)

    def forward(self, x) -> Tensor:
        x = E.as_tensor(x)
        for conv, norm in zip(self.convs, self.norms):
            x = norm(E.leaky_relu(conv(x), self.slope))
        pooled = x.reshape(x.shape[0], x.shape[1], -1).max(axis=-1)
        return E.softmax(self.head(pooled), axis=-1)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with E.no_grad(), self.evaluating():
            for s in range(0, len(x), batch_size):
                out.append(self(x[s:s + batch_size]).data)
        return np.concatenate(out)


@dataclass
class CNNResult:
    model: FullImageCNN
    accuracy: float
    history: list


def cnn_accuracy(cnn: FullImageCNN, split: Split) -> float:
    return float((cnn.predict(normalize(split.x)).argmax(axis=1) == split.y).mean())


def train_cnn_bound(train: Split, val: Split, num_classes: int, cfg: TrainConfig,
                    epochs: int = 10, seed: int | None = None, log=None) -> CNNResult:
    """Train on complete images; keep the weights with the best validation accuracy."""
    seed = cfg.seed if seed is None else seed
    cnn = FullImageCNN(train.x.shape[1], num_classes, substream(seed, "init", 50))
    ocfg = OptimConfig(learning_rate=cfg.lr1)
    opt = Adam(cnn.parameters(), ocfg)
    best, best_state, history, val_losses = -1.0, None, [], []
    for epoch in range(epochs):
        rng = substream(seed, "data", 50, epoch)
        cnn.train()
        for i, (xb, yb) in enumerate(train.batches(cfg.batch_size, rng)):
            if cfg.max_batches and i >= cfg.max_batches:
                break
            if len(yb) < 2:
                continue
            opt.zero_grad()
            loss = ce_loss(cnn(augment(xb, rng, cfg)), yb).mean()
            E.backward(loss)
            opt.step()
        acc = cnn_accuracy(cnn, val)
        val_losses.append(1.0 - acc)
        opt.lr = plateau_schedule(val_losses, ocfg)
        history.append(acc)
        if log:
            log(f"cnn epoch {epoch}: val acc {acc:.3f}")
        if acc > best:
            best = acc
            best_state = {k: v.copy() for k, v in state_dict(cnn).items()}
    load_into(cnn, best_state)
    return CNNResult(cnn, best, history)


def save_cnn(cnn: FullImageCNN, path, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind="cnn", channels=cnn.convs[0].weight.shape[1], num_classes=cnn.head.weight.shape[1],
                widths=list(cnn.widths))
    return save_checkpoint(path, state_dict(cnn), meta=meta)


def load_cnn(path) -> FullImageCNN:
    tensors, _, meta = read_checkpoint(path)
    if meta.get("kind") != "cnn":
        raise ValueError(f"{path} is not a CNN checkpoint")
    cnn = FullImageCNN(int(meta["channels"]), int(meta["num_classes"]), np.random.default_rng(0),
                       widths=tuple(meta.get("widths", (32, 64, 64, 128))))
    load_into(cnn, tensors)
    return cnn


def mask_to_trace(x: np.ndarray, trace: np.ndarray, steps: int, grid: GlimpseGrid) -> np.ndarray:
    """Zero (in [-1, 1] units) every pixel outside the first ``steps`` glimpses of each trace."""
    n = len(x)
    keep = np.zeros((n, grid.image_size, grid.image_size), dtype=bool)
    rows, cols = grid.top_left(np.asarray(trace)[:, :steps].reshape(-1))
    rows, cols = rows.reshape(n, -1), cols.reshape(n, -1)
    win = np.arange(grid.glimpse_size)
    bi = np.arange(n)[:, None, None]
    for t in range(rows.shape[1]):
        keep[bi, rows[:, t, None, None] + win[None, :, None], cols[:, t, None, None] + win[None, None, :]] = True
    return np.where(keep[:, None], x, 0.0).astype(x.dtype)


def masked_cnn_eval(cnn: FullImageCNN, traces: dict, split: Split, grid: GlimpseGrid) -> dict:
    """Per-policy accuracy of the CNN on images masked to the glimpses observed by step t."""
    x = normalize(split.x)
    out = {}
    for name, trace in traces.items():
        trace = np.asarray(trace)
        if trace.shape[0] != len(split):
            raise ValueError(f"trace for {name!r} covers {trace.shape[0]} images, split has {len(split)}")
        accs = []
        for t in range(trace.shape[1]):
            pred = cnn.predict(mask_to_trace(x, trace, t + 1, grid)).argmax(axis=1)
            accs.append(float((pred == split.y).mean()))
        out[name] = np.array(accs)
    return out
