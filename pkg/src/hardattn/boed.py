"""Expected-information-gain glimpse selection and the test-time episode loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PolicyConfig
from .model import HardAttentionModel
from .perception import EpisodeState, GlimpseError, new_episode, run_episode_step
from .tensor import engine as E
from .tensor.engine import Tensor


@dataclass
class EIGMap:
    values: np.ndarray     # (B, G)
    excluded: np.ndarray   # (B, G) visited cells
    P: int

    def grid(self, side: int) -> np.ndarray:
        return self.values.reshape(-1, side, side)


def kl_divergence(p, q, eps: float = 1e-12, axis: int = -1) -> np.ndarray:
    """D_KL[p || q] along ``axis`` with both arguments clamped below by eps."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[axis] != q.shape[axis]:
        raise ValueError(f"distributions differ in length: {p.shape} vs {q.shape}")
    p = np.maximum(p, eps)
    q = np.maximum(q, eps)
    return (p * (np.log(p) - np.log(q))).sum(axis=axis)


def lookahead_distribution(model: HardAttentionModel, h_prev, f_l) -> np.ndarray:
    """p(y | f~(l), h_{t-1}) in eval mode for a batch of synthesised features (B, F)."""
    perc = model.perception
    with E.no_grad(), perc.evaluating():
        h_tilde = perc.aggregator(E.as_tensor(h_prev), E.as_tensor(f_l))
        return perc.classifier(h_tilde).data


def baseline_distribution(model: HardAttentionModel, h_prev) -> np.ndarray:
    perc = model.perception
    with E.no_grad(), perc.evaluating():
        return perc.classifier(E.as_tensor(h_prev)).data


def eig_from_features(model: HardAttentionModel, h_prev, f_tilde: np.ndarray, visited: np.ndarray,
                      eps: float = 1e-12, baseline: np.ndarray | None = None) -> EIGMap:
    """One-pass EIG map from P synthesised maps ``f_tilde`` of shape (P, B, F, S, S)."""
    n_p, b = f_tilde.shape[:2]
    h_prev = E.as_tensor(h_prev).data
    if baseline is None:
        baseline = baseline_distribution(model, h_prev)
    perc = model.perception
    with E.no_grad(), perc.evaluating():
        h_rep = np.broadcast_to(h_prev, (n_p,) + h_prev.shape).reshape(n_p * b, -1)
        fmap = f_tilde.reshape((n_p * b,) + f_tilde.shape[2:])
        hmap = perc.aggregator.forward_map(Tensor(h_rep), Tensor(fmap))
        pmap = perc.classifier.forward_map(hmap).data          # (P*B, K, S, S)
    k = pmap.shape[1]
    look = pmap.reshape(n_p, b, k, -1)
    q = np.broadcast_to(baseline[None, :, :, None], look.shape)
    kl = kl_divergence(look, q, eps, axis=2)                   # (P, B, G)
    return EIGMap(kl.mean(axis=0), np.asarray(visited, dtype=bool).copy(), n_p)


def sample_feature_maps(model: HardAttentionModel, h_prev, P: int, rng: np.random.Generator) -> np.ndarray:
    """Draw P latents per batch element from q(z|h) and decode them: (P, B, F, S, S)."""
    h_prev = E.as_tensor(h_prev).data
    b = h_prev.shape[0]
    with E.no_grad(), model.evaluating():
        h_rep = np.broadcast_to(h_prev, (P,) + h_prev.shape).reshape(P * b, -1)
        z, _ = model.flows.sample(Tensor(h_rep), rng)
        f = model.pvae.decoder(z).data
    return f.reshape((P, b) + f.shape[1:])


def eig_map(model: HardAttentionModel, h_prev, visited: np.ndarray, cfg: PolicyConfig,
            rng: np.random.Generator) -> EIGMap:
    f_tilde = sample_feature_maps(model, h_prev, cfg.P, rng)
    return eig_from_features(model, h_prev, f_tilde, visited, cfg.kl_epsilon)


def select_location(emap: EIGMap) -> np.ndarray:
    """Argmax over non-excluded cells; ties go to the smallest row-major index."""
    if emap.excluded.all(axis=-1).any():
        raise GlimpseError("every candidate location has been visited")
    masked = np.where(emap.excluded, -np.inf, emap.values)
    return np.argmax(masked, axis=-1)


@dataclass
class InferenceTrace:
    """Episode plus the EIG maps that chose steps 1..T-1."""

    episode: EpisodeState
    maps: list = field(default_factory=list)

    @property
    def locations(self) -> np.ndarray:
        return self.episode.trace


def run_inference(x: np.ndarray, model: HardAttentionModel, cfg: PolicyConfig,
                  rng: np.random.Generator, l0: np.ndarray | None = None) -> InferenceTrace:
    """Random first glimpse, then T-1 EIG-greedy glimpses with P posterior samples each."""
    b = x.shape[0]
    grid = model.grid
    if l0 is None:
        l0 = rng.integers(0, grid.num_cells, size=b)
    trace = InferenceTrace(new_episode(b, model.cfg))
    with E.no_grad(), model.evaluating():
        run_episode_step(trace.episode, x, l0, model.perception, grid)
        for _ in range(1, cfg.T):
            ep = trace.episode
            emap = eig_map(model, ep.h, ep.visited, cfg, rng)
            trace.maps.append(emap)
            run_episode_step(ep, x, select_location(emap), model.perception, grid)
    return trace
