"""Three-phase training: classifier pre-training, Partial-VAE pre-training, end-to-end fine-tuning.

Phase 1 trains F, R and C on uniformly random glimpse sequences. Phase 2
freezes them and trains the flow posterior S, the decoder D and sigma on
target feature maps from the frozen encoder. Phase 3 trains everything,
choosing glimpses greedily from single-sample EIG maps.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boed import eig_from_features, select_location
from .config import RunConfig, TrainConfig, format_config
from .data import Dataset, Split, normalize
from .model import HardAttentionModel
from .perception import new_episode, run_episode_step
from .pvae import LikelihoodConfig, build_target_feature_map, pvae_loss, synthesize
from .tensor import engine as E
from .tensor.checkpoint import load_optimizer, read_checkpoint
from .tensor.engine import Tensor
from .tensor.optim import Adam, OptimConfig, plateau_schedule
from .tensor.rng import substream

RUN_ROOT_ENV = "HARDATTN_RUN_ROOT"
METRICS_FIELDS = ("epoch", "phase", "train_loss", "val_loss", "val_acc_per_t")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ce_loss(p, y, eps: float = 1e-12) -> Tensor:
    """-log p[y] per batch element, with p clamped below by eps."""
    p = E.as_tensor(p)
    y = np.asarray(y)
    if y.dtype.kind not in "iu" or (y < 0).any() or (y >= p.shape[-1]).any():
        raise TrainingError(f"label outside [0, {p.shape[-1]})")
    picked = E.take_along_axis(p, y.reshape(-1, 1), axis=1).reshape(-1)
    return -E.log(E.clamp_min(picked, eps))


def total_loss(pvae_terms, ce_terms, alpha: float, beta: float) -> Tensor:
    """mean over batch and time of alpha * L_PVAE(t) + beta * L_CE(t).

    Either list may be empty (or hold None) when its weight is irrelevant.
    """
    steps = max(len(pvae_terms), len(ce_terms))
    if steps == 0:
        raise TrainingError("no per-step losses")
    acc = None
    for t in range(steps):
        parts = []
        if alpha and t < len(pvae_terms) and pvae_terms[t] is not None:
            parts.append(alpha * E.as_tensor(pvae_terms[t]))
        if beta and t < len(ce_terms) and ce_terms[t] is not None:
            parts.append(beta * E.as_tensor(ce_terms[t]))
        for part in parts:
            acc = part if acc is None else acc + part
    if acc is None:
        return Tensor(np.zeros(()))
    return acc.mean() * (1.0 / steps)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(x: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """uint8 batch (B, C, H, W) -> float32 in [-1, 1] with the enabled augmentations."""
    out = normalize(x)
    b, _, h, w = out.shape
    if cfg.augment_scale or cfg.augment_crop:
        scale = rng.uniform(0.8, 1.2, size=b) if cfg.augment_scale else np.ones(b)
        shift = rng.integers(-4, 5, size=(b, 2)) if cfg.augment_crop else np.zeros((b, 2), dtype=int)
        out = _resample(out, scale, shift)
    if cfg.augment_flip:
        flip = rng.random(b) < 0.5
        out[flip] = out[flip, :, :, ::-1]
    if cfg.augment_jitter:
        bright = rng.uniform(-0.2, 0.2, size=(b, 1, 1, 1))
        contrast = rng.uniform(0.8, 1.2, size=(b, 1, 1, 1))
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        out = (out - mean) * contrast + mean + bright
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _resample(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Nearest-neighbour zoom about the centre then translation, edge pixels repeated.

    A shift in [-4, 4] with edge padding stands in for the pad-4 random crop.
    """
    b, _, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows = (np.arange(h)[None, :] - cy) / scale[:, None] + cy + shift[:, :1]
    cols = (np.arange(w)[None, :] - cx) / scale[:, None] + cx + shift[:, 1:]
    rows = np.clip(np.rint(rows), 0, h - 1).astype(int)
    cols = np.clip(np.rint(cols), 0, w - 1).astype(int)
    bi = np.arange(b)[:, None, None]
    out = x.transpose(0, 2, 3, 1)[bi, rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def random_locations(batch: int, steps: int, num_cells: int, rng: np.random.Generator) -> np.ndarray:
    """(B, steps) sequences drawn uniformly without replacement from the grid."""
    if steps > num_cells:
        raise TrainingError("more steps than grid cells")
    return np.argsort(rng.random((batch, num_cells)), axis=1)[:, :steps]


# ---------------------------------------------------------------------------
# phase bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class PhaseState:
    """Which parameters a phase may touch and how it picks glimpses."""

    phase: int
    active: list
    frozen: list
    sampling: str        # "random" | "eig"
    _snapshot: list = field(default_factory=list, repr=False)

    def snapshot(self) -> None:
        self._snapshot = [p.data.copy() for p in self.frozen]

    def check_frozen(self) -> None:
        for p, ref in zip(self.frozen, self._snapshot):
            if not np.array_equal(p.data, ref):
                raise TrainingError(f"frozen parameter changed during phase {self.phase}")


def phase_state(model: HardAttentionModel, phase: int) -> PhaseState:
    disc, gen = model.discriminative_parameters(), model.generative_parameters()
    if phase == 1:
        return PhaseState(1, disc, gen, "random")
    if phase == 2:
        return PhaseState(2, gen, disc, "random")
    if phase == 3:
        return PhaseState(3, disc + gen, [], "eig")
    raise TrainingError(f"unknown phase {phase}")


@dataclass
class EpochStats:
    loss: float
    acc_per_t: np.ndarray


@dataclass
class PhaseResult:
    phase: int
    history: list            # dicts matching METRICS_FIELDS
    best_epoch: int
    checkpoint: Path | None


# ---------------------------------------------------------------------------
# per-batch objectives
# ---------------------------------------------------------------------------

def _likelihood(cfg: TrainConfig) -> LikelihoodConfig:
    return LikelihoodConfig(cfg.nll_reduction)


def phase1_batch(model, x, y, cfg: TrainConfig, rng) -> tuple[Tensor, np.ndarray]:
    """Random-glimpse cross-entropy; returns (loss, correct (B, T))."""
    locs = random_locations(len(y), cfg.T, model.grid.num_cells, rng)
    ep = new_episode(len(y), model.cfg)
    ce = []
    for t in range(cfg.T):
        run_episode_step(ep, x, locs[:, t], model.perception, model.grid)
        ce.append(ce_loss(ep.probs[-1], y))
    return total_loss([], ce, 0.0, cfg.beta), _correct(ep, y)


def _perception_states(model, x, locs):
    """Frozen-path episode (eval mode, no tape): hidden states (T, B, H) and masks (T, B, G)."""
    b, steps = locs.shape
    ep = new_episode(b, model.cfg)
    hs, masks = [], []
    with E.no_grad(), model.perception.evaluating():
        for t in range(steps):
            run_episode_step(ep, x, locs[:, t], model.perception, model.grid)
            hs.append(ep.h.data)
            masks.append(ep.visited)
    return np.stack(hs), np.stack(masks), ep


def phase2_batch(model, x, y, cfg: TrainConfig, rng, targets=None):
    """Partial-VAE objective on random glimpse sequences; all T steps in one batch."""
    locs = random_locations(len(y), cfg.T, model.grid.num_cells, rng)
    hs, masks, ep = _perception_states(model, x, locs)
    if targets is None:
        with model.perception.evaluating():
            targets = build_target_feature_map(x, model.perception.encoder, model.grid)
    steps, b = hs.shape[:2]
    side = model.grid.side
    synth = synthesize(Tensor(hs.reshape(steps * b, -1)), model.flows, model.pvae.decoder, rng)
    f = np.broadcast_to(targets, (steps,) + targets.shape).reshape((steps * b,) + targets.shape[1:])
    loss, _, _ = pvae_loss(synth, f, masks.reshape(steps * b, side, side),
                           model.pvae.log_sigma_sq, _likelihood(cfg))
    per_t = list(loss.reshape(steps, b)[t] for t in range(steps))
    alpha = cfg.alpha_for(model.cfg.latent_dim)
    return total_loss(per_t, [], alpha, 0.0), _correct(ep, y)


def phase3_batch(model, x, y, cfg: TrainConfig, rng, l0=None, record: list | None = None):
    """End-to-end objective with single-sample EIG glimpse selection.

    ``l0`` fixes the first glimpses; the attended trace is appended to ``record`` if given.
    """
    b = len(y)
    grid = model.grid
    if cfg.target_mode == "live" or not hasattr(model, "_frozen_encoder"):
        encoder = model.perception.encoder
    else:
        encoder = model._frozen_encoder
    with encoder.evaluating():
        targets = build_target_feature_map(x, encoder, grid)
    ep = new_episode(b, model.cfg)
    l = rng.integers(0, grid.num_cells, size=b) if l0 is None else np.asarray(l0)
    pv, ce = [], []
    for t in range(cfg.T):
        run_episode_step(ep, x, l, model.perception, grid)
        ce.append(ce_loss(ep.probs[-1], y))
        synth = synthesize(ep.h, model.flows, model.pvae.decoder, rng)
        loss, _, _ = pvae_loss(synth, targets, ep.visited.reshape(b, grid.side, grid.side),
                               model.pvae.log_sigma_sq, _likelihood(cfg))
        pv.append(loss)
        if t < cfg.T - 1:
            emap = eig_from_features(model, ep.h.data, synth.f_tilde.data[None], ep.visited)
            l = select_location(emap)
    if record is not None:
        record.append(ep.trace)
    alpha = cfg.alpha_for(model.cfg.latent_dim)
    return total_loss(pv, ce, alpha, cfg.beta), _correct(ep, y)


def _correct(ep, y) -> np.ndarray:
    return ep.class_dists.argmax(axis=-1) == np.asarray(y)[:, None]


BATCH_FNS = {1: phase1_batch, 2: phase2_batch, 3: phase3_batch}


# ---------------------------------------------------------------------------
# epoch loops
# ---------------------------------------------------------------------------

def _train_mode(model, phase: int) -> None:
    model.train()
    if phase == 2:
        model.perception.eval()


def validate(model, split: Split, cfg: TrainConfig, phase: int, seed: int) -> EpochStats:
    """Phase objective and per-step accuracy on a split, eval mode, fixed glimpse stream."""
    rng = substream(seed, "sampling", 10_000 + phase)
    losses, weights, correct = [], [], []
    with E.no_grad(), model.evaluating():
        for xb, yb in split.batches(cfg.batch_size):
            loss, corr = BATCH_FNS[phase](model, normalize(xb), yb, cfg, rng)
            losses.append(float(loss.data))
            weights.append(len(yb))
            correct.append(corr)
    acc = np.concatenate(correct).mean(axis=0)
    return EpochStats(float(np.average(losses, weights=weights)), acc)


def train_epoch(model, opt: Adam, state: PhaseState, split: Split, cfg: TrainConfig,
                epoch: int) -> float:
    phase = state.phase
    data_rng = substream(cfg.seed, "data", phase, epoch)
    rng = substream(cfg.seed, "sampling", phase, epoch)
    model.set_dropout_rng(substream(cfg.seed, "dropout", phase, epoch))
    _train_mode(model, phase)
    losses, weights = [], []
    for i, (xb, yb) in enumerate(split.batches(cfg.batch_size, data_rng)):
        if cfg.max_batches and i >= cfg.max_batches:
            break
        if len(yb) < 2:
            continue
        x = augment(xb, data_rng, cfg)
        opt.zero_grad()
        model.zero_grad()
        loss, _ = BATCH_FNS[phase](model, x, yb, cfg, rng)
        E.backward(loss)
        opt.step()
        state.check_frozen()
        losses.append(float(loss.data))
        weights.append(len(yb))
    E.clear_tape()
    return float(np.average(losses, weights=weights))


def _actnorm_init(model, split: Split, cfg: TrainConfig) -> None:
    """Data-dependent ActNorm initialisation from one batch of phase-2 hidden states."""
    rng = substream(cfg.seed, "sampling", 2, 999_999)
    xb, _ = next(split.batches(cfg.batch_size, substream(cfg.seed, "data", 2, 999_999)))
    locs = random_locations(len(xb), cfg.T, model.grid.num_cells, rng)
    hs, _, _ = _perception_states(model, normalize(xb), locs)
    model.flows.data_init(Tensor(hs.reshape(-1, hs.shape[-1])), rng)


def _epochs(cfg: TrainConfig, phase: int) -> int:
    return {1: cfg.epochs1, 2: cfg.epochs2, 3: cfg.epochs3}[phase]


def train_phase(model: HardAttentionModel, data: Dataset, cfg: TrainConfig, phase: int,
                run_dir: Path | None = None, optimizer: Adam | None = None,
                start_epoch: int = 0, log=None) -> PhaseResult:
    """Run one phase with plateau halving, early stopping and best-weights restore."""
    if len(data.train) == 0:
        raise TrainingError("training split is empty")
    done = getattr(model, "completed_phase", 0)
    if phase > 1 and done < phase - 1:
        raise TrainingError(f"phase {phase} needs a phase-{phase - 1} checkpoint")
    state = phase_state(model, phase)
    state.snapshot()
    ocfg = OptimConfig(learning_rate=cfg.lr_for(phase))
    opt = optimizer or Adam(state.active, ocfg)
    if phase == 2 and not all(getattr(m, "initialized", True) for m in model.flows.layers):
        _actnorm_init(model, data.train, cfg)
    if phase == 3 and cfg.target_mode == "frozen":
        import copy
        object.__setattr__(model, "_frozen_encoder", copy.deepcopy(model.perception.encoder))

    history, val_losses = [], []
    best = (np.inf, -1, None)
    stale = 0
    for epoch in range(start_epoch, _epochs(cfg, phase)):
        train_loss = train_epoch(model, opt, state, data.train, cfg, epoch)
        val = validate(model, data.val, cfg, phase, cfg.seed)
        val_losses.append(val.loss)
        opt.lr = plateau_schedule(val_losses, ocfg)
        row = dict(epoch=epoch, phase=phase, train_loss=train_loss, val_loss=val.loss,
                   val_acc_per_t=val.acc_per_t)
        history.append(row)
        if log:
            log(f"phase {phase} epoch {epoch}: train {train_loss:.4f} val {val.loss:.4f} "
                f"acc {np.round(val.acc_per_t, 3).tolist()} lr {opt.lr:.2e}")
        if run_dir is not None:
            append_metrics(run_dir / "metrics.csv", row)
        if val.loss < best[0] - ocfg.plateau_tolerance:
            best = (val.loss, epoch, [p.data.copy() for p in model.parameters()],
                    [b.copy() for _, b in model.named_buffers()])
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best[2] is not None:
        for p, saved in zip(model.parameters(), best[2]):
            np.copyto(p.data, saved)
        for (_, buf), saved in zip(model.named_buffers(), best[3]):
            np.copyto(buf, saved)
    state.check_frozen()
    object.__setattr__(model, "completed_phase", max(done, phase))
    ckpt = None
    if run_dir is not None:
        ckpt = run_dir / f"phase{phase}.npz"
        model.save(ckpt, opt, meta=dict(phase=phase, best_epoch=best[1], seed=cfg.seed))
    return PhaseResult(phase, history, best[1], ckpt)


def train_phase1(model, data, cfg, **kw) -> PhaseResult:
    return train_phase(model, data, cfg, 1, **kw)


def train_phase2(model, data, cfg, **kw) -> PhaseResult:
    return train_phase(model, data, cfg, 2, **kw)


def train_phase3(model, data, cfg, **kw) -> PhaseResult:
    return train_phase(model, data, cfg, 3, **kw)


def train_all(model, data, cfg: TrainConfig, run_dir: Path | None = None, log=None) -> list[PhaseResult]:
    return [train_phase(model, data, cfg, phase, run_dir=run_dir, log=log) for phase in (1, 2, 3)]


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def prepare_run_dir(name: str, cfg: RunConfig, root: Path | None = None) -> Path:
    path = (root or run_root()) / name
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(format_config(cfg))
    return path


def append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_FIELDS)
        acc = ";".join(f"{a:.6f}" for a in row["val_acc_per_t"])
        writer.writerow([row["epoch"], row["phase"], f"{row['train_loss']:.6f}",
                         f"{row['val_loss']:.6f}", acc])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"], r["phase"] = int(r["epoch"]), int(r["phase"])
        r["train_loss"], r["val_loss"] = float(r["train_loss"]), float(r["val_loss"])
        r["val_acc_per_t"] = np.array([float(v) for v in r["val_acc_per_t"].split(";")])
    return rows


def resume(model: HardAttentionModel, path, phase: int, cfg: TrainConfig) -> tuple[Adam | None, dict]:
    """Load a checkpoint; reuse its optimizer state when it was saved by the same phase."""
    meta = model.load(path)
    object.__setattr__(model, "completed_phase", int(meta.get("phase", 0)))
    if int(meta.get("phase", 0)) != phase:
        return None, meta
    _, opt_entries, _ = read_checkpoint(path)
    state = phase_state(model, phase)
    opt = Adam(state.active, OptimConfig(learning_rate=cfg.lr_for(phase)))
    ids = {id(p): n for n, p in model.named_parameters()}
    load_optimizer(opt, opt_entries, [ids[id(p)] for p in opt.params])
    # the phase already finished once; resuming reruns it from the saved weights
    object.__setattr__(model, "completed_phase", phase - 1)
    return opt, meta


def replace_train(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **kw))
