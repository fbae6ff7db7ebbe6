"""Glimpse mechanics and the discriminative path F, R and C."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import BatchNorm, Conv2d, Dropout, LayerNorm, Module, ModuleList


class GlimpseError(ValueError):
    pass


@dataclass(frozen=True)
class GlimpseGrid:
    """Stride-aligned lattice of candidate glimpses, indexed row-major."""

    image_size: int
    glimpse_size: int
    stride: int

    def __post_init__(self):
        span = self.image_size - self.glimpse_size
        if span < 0 or span % self.stride:
            raise GlimpseError("glimpse grid does not tile the image")

    @property
    def side(self) -> int:
        return (self.image_size - self.glimpse_size) // self.stride + 1

    @property
    def num_cells(self) -> int:
        return self.side * self.side

    def check(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.dtype.kind not in "iu" or (idx < 0).any() or (idx >= self.num_cells).any():
            raise GlimpseError(f"location index outside the {self.side}x{self.side} grid: {idx}")
        return idx

    def top_left(self, idx):
        idx = self.check(idx)
        return (idx // self.side) * self.stride, (idx % self.side) * self.stride

    def centers(self) -> np.ndarray:
        """(G, 2) pixel-space (row, col) glimpse centres."""
        idx = np.arange(self.num_cells)
        r, c = self.top_left(idx)
        half = self.glimpse_size / 2.0
        return np.stack([r + half, c + half], axis=1)

    def normalized_locations(self) -> np.ndarray:
        """Centres scaled to [-1, 1]^2."""
        return self.centers() / self.image_size * 2.0 - 1.0

    def extract(self, x: np.ndarray, idx) -> np.ndarray:
        """Crop glimpse ``idx[b]`` from ``x[b]`` for a batch (B, C, H, W)."""
        idx = np.broadcast_to(self.check(idx), (x.shape[0],))
        r, c = self.top_left(idx)
        g = self.glimpse_size
        rows = r[:, None] + np.arange(g)[None, :]
        cols = c[:, None] + np.arange(g)[None, :]
        b = np.arange(x.shape[0])[:, None, None, None]
        ch = np.arange(x.shape[1])[None, :, None, None]
        return x[b, ch, rows[:, None, :, None], cols[:, None, None, :]]

    def extract_all(self, x: np.ndarray) -> np.ndarray:
        """(B, G, C, g, g) array with every candidate glimpse of every image."""
        g, s = self.glimpse_size, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (g, g), axis=(2, 3))[:, :, ::s, ::s]
        # (B, C, side, side, g, g) -> (B, side*side, C, g, g)
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            x.shape[0], self.num_cells, x.shape[1], g, g)

    def pixel_mask(self, idx_seq) -> np.ndarray:
        """Boolean (H, W) union of the glimpses in ``idx_seq``."""
        mask = np.zeros((self.image_size, self.image_size), dtype=bool)
        for i in np.atleast_1d(idx_seq):
            r, c = self.top_left(int(i))
            mask[r:r + self.glimpse_size, c:c + self.glimpse_size] = True
        return mask

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "GlimpseGrid":
        return cls(cfg.image_size, cfg.glimpse_size, cfg.stride)


def extract_glimpse(x: np.ndarray, l: int, grid: GlimpseGrid) -> np.ndarray:
    """Single-image form: (C, H, W) image, grid index l -> (C, g, g) crop."""
    return grid.extract(x[None], np.array([l]))[0]


def _as4d(t: Tensor) -> Tensor:
    return t.reshape(t.shape + (1, 1)) if t.ndim == 2 else t


class GlimpseEncoder(Module):
    """F(g, l) = F_g(g) + F_l(l).

    F_g is ``n_g`` blocks of BN(LeakyReLU(Conv k=3)) then a k=2 conv, so its
    receptive field is exactly one glimpse; F_l is a 1x1 conv on the
    2-channel normalised location.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.slope = cfg.slope
        width = cfg.glimpse_channels
        convs, norms = [], []
        cin = cfg.channels
        for _ in range(cfg.n_g):
            convs.append(Conv2d(cin, width, 3, rng))
            norms.append(BatchNorm(width))
            cin = width
        self.convs = ModuleList(convs)
        self.norms = ModuleList(norms)
        self.head = Conv2d(cin, cfg.feature_dim, 2, rng)
        self.loc = Conv2d(2, cfg.feature_dim, 1, rng)

    def glimpse_features(self, g) -> Tensor:
        x = E.as_tensor(g)
        for conv, norm in zip(self.convs, self.norms):
            x = norm(E.leaky_relu(conv(x), self.slope))
        return self.head(x)

    def location_features(self, loc) -> Tensor:
        loc = E.as_tensor(loc)
        return self.loc(loc.reshape(loc.shape + (1, 1)) if loc.ndim == 2 else loc)

    def forward(self, g, loc) -> Tensor:
        """(B, C, g, g) glimpses and (B, 2) locations -> (B, feature_dim)."""
        out = self.glimpse_features(g) + self.location_features(loc)
        return out.reshape(out.shape[0], -1)


class RecurrentAggregator(Module):
    """R(h, f) = LN(LeakyReLU(F_h(h) + F_f(f))), F_f = Conv1x1(BN(LeakyReLU(.))).

    Works on 4-d maps so a (B, F, S, S) grid of candidate features is
    processed in one pass with h broadcast over the grid.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.slope = cfg.slope
        self.f_h = Conv2d(cfg.hidden_dim, cfg.hidden_dim, 1, rng)
        self.f_norm = BatchNorm(cfg.feature_dim)
        self.f_f = Conv2d(cfg.feature_dim, cfg.hidden_dim, 1, rng)
        self.norm = LayerNorm(None, axes=(1,))

    def forward_map(self, h, fmap) -> Tensor:
        hh = self.f_h(_as4d(E.as_tensor(h)))
        ff = self.f_f(self.f_norm(E.leaky_relu(_as4d(E.as_tensor(fmap)), self.slope)))
        return self.norm(E.leaky_relu(hh + ff, self.slope))

    def forward(self, h, f) -> Tensor:
        out = self.forward_map(h, f)
        return out.reshape(out.shape[0], -1)


class Classifier(Module):
    """p(y|h) = Softmax(Conv1x1(Dropout_{0.5}(h))) along the channel axis."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.drop = Dropout(cfg.dropout)
        self.out = Conv2d(cfg.hidden_dim, cfg.num_classes, 1, rng)

    def forward_map(self, hmap) -> Tensor:
        return E.softmax(self.out(self.drop(_as4d(E.as_tensor(hmap)))), axis=1)

    def forward(self, h) -> Tensor:
        p = self.forward_map(h)
        return p.reshape(p.shape[0], -1)


class Perception(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = GlimpseEncoder(cfg, rng)
        self.aggregator = RecurrentAggregator(cfg, rng)
        self.classifier = Classifier(cfg, rng)


@dataclass
class EpisodeState:
    """Attention episodes for a batch of images.

    ``h`` is the state after the last step (zeros before the first);
    ``visited`` is the grid-resolution mask m_t.
    """

    h: Tensor
    visited: np.ndarray
    locations: list = field(default_factory=list)
    glimpses: list = field(default_factory=list)
    features: list = field(default_factory=list)
    probs: list = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.locations) - 1

    @property
    def batch_size(self) -> int:
        return self.visited.shape[0]

    @property
    def class_dists(self) -> np.ndarray:
        """(B, steps, K) recorded p(y|h_t)."""
        return np.stack([p.data for p in self.probs], axis=1)

    @property
    def trace(self) -> np.ndarray:
        """(B, steps) attended grid indices."""
        return np.stack(self.locations, axis=1)


def new_episode(batch_size: int, cfg: ModelConfig) -> EpisodeState:
    grid = cfg.grid_side ** 2
    h = Tensor(np.zeros((batch_size, cfg.hidden_dim), dtype=E.get_default_dtype()))
    return EpisodeState(h=h, visited=np.zeros((batch_size, grid), dtype=bool))


def run_episode_step(state: EpisodeState, x: np.ndarray, l, perception: Perception,
                     grid: GlimpseGrid) -> EpisodeState:
    """Capture g_t at l_t, compute f_t, h_t and p(y|h_t), and mark l_t visited."""
    l = np.broadcast_to(grid.check(np.asarray(l, dtype=np.int64)), (state.batch_size,)).copy()
    rows = np.arange(state.batch_size)
    if state.visited[rows, l].any():
        raise GlimpseError("revisiting an attended location is not allowed")
    g = grid.extract(x, l)
    loc = grid.normalized_locations()[l].astype(E.get_default_dtype())
    f = perception.encoder(g, loc)
    h = perception.aggregator(state.h, f)
    p = perception.classifier(h)
    state.visited = state.visited.copy()
    state.visited[rows, l] = True
    state.h = h
    state.locations.append(l)
    state.glimpses.append(g)
    state.features.append(f)
    state.probs.append(p)
    return state
