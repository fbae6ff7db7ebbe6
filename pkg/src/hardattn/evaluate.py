"""Policy evaluation: EIG-greedy and random glimpse sequences over a data split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boed import run_inference
from .config import PolicyConfig
from .data import Split, normalize
from .model import HardAttentionModel
from .perception import GlimpseGrid, new_episode, run_episode_step
from .tensor import engine as E
from .tensor.rng import substream

POLICIES = ("eig", "random")


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    policy: str
    accuracy: np.ndarray        # (T,)
    entropy: np.ndarray         # (T,) mean entropy of p(y|h_t)
    area: np.ndarray            # (T,) mean observed-pixel fraction
    confusion: np.ndarray       # (K, K) rows true class, columns prediction at t = T-1
    traces: np.ndarray          # (N, T) attended grid cells
    predictions: np.ndarray     # (N, T)
    labels: np.ndarray          # (N,)
    maps: list = field(default_factory=list)   # per batch: (N_b, T-1, G) EIG values, eig policy only

    @property
    def T(self) -> int:
        return len(self.accuracy)

    def eig_maps(self) -> np.ndarray | None:
        return np.concatenate(self.maps) if self.maps else None


def entropy(p: np.ndarray, eps: float = 1e-12, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.maximum(p, eps))).sum(axis=axis)


def observed_area(traces: np.ndarray, grid: GlimpseGrid) -> np.ndarray:
    """(N, T) cells -> (N, T) fraction of pixels covered by the first t+1 glimpses."""
    traces = np.asarray(traces)
    n, steps = traces.shape
    s, g = grid.image_size, grid.glimpse_size
    covered = np.zeros((n, s, s), dtype=bool)
    out = np.empty((n, steps))
    rows, cols = grid.top_left(traces.reshape(-1))
    rows, cols = rows.reshape(n, steps), cols.reshape(n, steps)
    win = np.arange(g)
    for t in range(steps):
        rr = rows[:, t, None, None] + win[None, :, None]
        cc = cols[:, t, None, None] + win[None, None, :]
        covered[np.arange(n)[:, None, None], rr, cc] = True
        out[:, t] = covered.reshape(n, -1).mean(axis=1)
    return out


def brute_force_area(trace, grid: GlimpseGrid) -> np.ndarray:
    """Per-step pixel-union fraction for one trace, by painting each glimpse on its own mask."""
    fracs = []
    for t in range(len(trace)):
        fracs.append(grid.pixel_mask(trace[:t + 1]).mean())
    return np.array(fracs)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def initial_locations(n: int, grid: GlimpseGrid, seed: int) -> np.ndarray:
    """l_0 for every image of a split; shared by all policies so comparisons are paired."""
    return substream(seed, "sampling", 777).integers(0, grid.num_cells, size=n)


def random_episode(model: HardAttentionModel, x: np.ndarray, l0: np.ndarray, T: int,
                   rng: np.random.Generator):
    """Eval-mode episode whose later glimpses are uniform over the unvisited cells."""
    b = len(l0)
    g = model.grid.num_cells
    keys = rng.random((b, g))
    keys[np.arange(b), l0] = -1.0          # l_0 first, then a random order of the rest
    locs = np.argsort(keys, axis=1)[:, :T]
    ep = new_episode(b, model.cfg)
    with E.no_grad(), model.evaluating():
        for t in range(T):
            run_episode_step(ep, x, locs[:, t], model.perception, model.grid)
    return ep


def check_compatible(model: HardAttentionModel, split: Split, num_classes: int | None = None) -> None:
    c = model.cfg
    if split.x.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise EvalError(f"images {split.x.shape[1:]} do not match the model input "
                        f"{(c.channels, c.image_size, c.image_size)}")
    if num_classes is not None and num_classes != c.num_classes:
        raise EvalError(f"dataset has {num_classes} classes, model predicts {c.num_classes}")
    if len(split.y) and split.y.max() >= c.num_classes:
        raise EvalError("labels exceed the model's class count")


def evaluate_policy(model: HardAttentionModel, policy: str, split: Split, cfg: PolicyConfig,
                    seed: int = 0, batch_size: int = 64, keep_maps: bool = True,
                    num_classes: int | None = None) -> EvalReport:
    """Run ``policy`` over every image and collect the per-step metrics."""
    if policy not in POLICIES:
        raise EvalError(f"unknown policy {policy!r}")
    check_compatible(model, split, num_classes)
    grid = model.grid
    l0_all = initial_locations(len(split), grid, seed)
    traces, probs, maps = [], [], []
    for i, start in enumerate(range(0, len(split), batch_size)):
        sl = slice(start, start + batch_size)
        x = normalize(split.x[sl])
        rng = substream(seed, "sampling", 1000 + i)
        if policy == "eig":
            tr = run_inference(x, model, cfg, rng, l0=l0_all[sl])
            ep = tr.episode
            if keep_maps and tr.maps:
                maps.append(np.stack([m.values for m in tr.maps], axis=1))
        else:
            ep = random_episode(model, x, l0_all[sl], cfg.T, rng)
        traces.append(ep.trace)
        probs.append(ep.class_dists)
    traces = np.concatenate(traces)
    probs = np.concatenate(probs)
    preds = probs.argmax(axis=-1)
    y = split.y
    return EvalReport(
        policy=policy,
        accuracy=(preds == y[:, None]).mean(axis=0),
        entropy=entropy(probs).mean(axis=0),
        area=observed_area(traces, grid).mean(axis=0),
        confusion=confusion_matrix(y, preds[:, -1], model.cfg.num_classes),
        traces=traces, predictions=preds, labels=y.copy(), maps=maps)


def smoothed_nonincreasing(values, window: int = 1, tol: float = 0.0) -> bool:
    """Directional check: the moving average of ``values`` never rises by more than tol.

    Per-step values are already split means; ``window`` adds optional smoothing over t.
    """
    v = np.asarray(values, dtype=np.float64)
    if window > 1 and len(v) >= window:
        v = np.convolve(v, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(v) <= tol))
