"""The full model: perception (F, R, C), flow posterior S and the Partial VAE decoder D."""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import ModelConfig
from .flows import FlowStack
from .perception import GlimpseGrid, Perception
from .pvae import PartialVAE
from .tensor.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint, state_dict
from .tensor.nn import Module
from .tensor.rng import substream


class HardAttentionModel(Module):
    """Checkpoint namespaces: ``perception/*``, ``flows/*``, ``pvae/*``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "grid", GlimpseGrid.from_config(cfg))
        object.__setattr__(self, "completed_phase", 0)
        rng = substream(seed, "init")
        self.perception = Perception(cfg, rng)
        self.flows = FlowStack(cfg.latent_dim, cfg.hidden_dim, cfg.flow_layers, rng)
        self.pvae = PartialVAE(cfg, rng)

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        self.perception.classifier.drop.rng = rng

    def discriminative_parameters(self):
        return self.perception.parameters()

    def generative_parameters(self):
        return self.flows.parameters() + self.pvae.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return state_dict(self)

    def save(self, path, optimizer=None, meta=None):
        names = [n for n, _ in self.named_parameters()]
        if optimizer is not None:
            ids = {id(p): n for n, p in self.named_parameters()}
            names = [ids[id(p)] for p in optimizer.params]
        meta = dict(meta or {})
        meta["model_config"] = dataclasses.asdict(self.cfg)
        meta.setdefault("phase", self.completed_phase)
        meta["actnorm_initialized"] = all(
            getattr(m, "initialized", True) for m in self.flows.layers)
        return save_checkpoint(path, self.state(), optimizer, names, meta)

    def load(self, path, strict: bool = True) -> dict:
        tensors, _, meta = read_checkpoint(path)
        load_into(self, tensors, strict=strict)
        object.__setattr__(self, "completed_phase", int(meta.get("phase", 0)))
        if meta.get("actnorm_initialized"):
            for m in self.flows.layers:
                if hasattr(m, "initialized"):
                    m.initialized = True
        return meta


def load_model(path, seed: int = 0) -> tuple[HardAttentionModel, dict]:
    """Rebuild a model from the configuration stored in its checkpoint and load the weights."""
    _, _, meta = read_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path} does not record a model configuration")
    model = HardAttentionModel(ModelConfig(**meta["model_config"]), seed)
    return model, model.load(path)
