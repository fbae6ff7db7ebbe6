"""Versioned parameter checkpoints.

The container is an uncompressed ``.npz`` archive. Every entry is stored
little-endian with explicit dtype and shape; reserved keys start with
``__``. Optimizer moments live under ``__adam_m__/<name>`` and
``__adam_v__/<name>``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import Module
from .optim import Adam

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def state_dict(module: Module, prefix: str = "") -> dict[str, np.ndarray]:
    out = {prefix + k: p.data for k, p in module.named_parameters()}
    out.update({prefix + "buffers/" + k: b for k, b in module.named_buffers()})
    return out


def _le(arr: np.ndarray) -> np.ndarray:
    # astype rather than ascontiguousarray, which would promote 0-d arrays to 1-d
    return np.asarray(arr).astype(arr.dtype.newbyteorder("<"), order="C")


def save_checkpoint(path, tensors: dict[str, np.ndarray], optimizer: Adam | None = None,
                    param_names: list[str] | None = None, meta: dict | None = None) -> Path:
    """Write named arrays plus optional Adam moments (keyed by ``param_names``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: _le(v) for k, v in tensors.items()}
    payload["__version__"] = np.array([FORMAT_VERSION], dtype="<i8")
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    if optimizer is not None:
        names = param_names or [str(i) for i in range(len(optimizer.params))]
        payload["__adam_step__"] = np.array([optimizer.state.step], dtype="<i8")
        payload["__adam_lr__"] = np.array([optimizer.lr], dtype="<f8")
        for name, m, v in zip(names, optimizer.state.m, optimizer.state.v):
            payload["__adam_m__/" + name] = _le(m)
            payload["__adam_v__/" + name] = _le(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return (tensors, optimizer entries, meta); raises on unknown versions."""
    with np.load(Path(path), allow_pickle=False) as z:
        entries = {k: z[k] for k in z.files}
    version = entries.pop("__version__", None)
    if version is None or int(version[0]) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    meta = json.loads(bytes(entries.pop("__meta__")).decode() or "{}")
    opt = {k: entries.pop(k) for k in list(entries) if k.startswith("__adam")}
    return entries, opt, meta


def load_into(module: Module, tensors: dict[str, np.ndarray], prefix: str = "",
              strict: bool = True) -> None:
    """Copy arrays into the module in place; names and shapes must match exactly."""
    expected = state_dict(module, prefix)
    found = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    if strict:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, target in expected.items():
        if name not in found:
            continue
        src = found[name]
        if src.shape != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {target.shape}")
        np.copyto(target, src.astype(target.dtype))


def load_optimizer(optimizer: Adam, opt_entries: dict, param_names: list[str]) -> None:
    if "__adam_step__" not in opt_entries:
        raise CheckpointError("checkpoint carries no optimizer state")
    m, v = [], []
    for name, p in zip(param_names, optimizer.params):
        mk, vk = "__adam_m__/" + name, "__adam_v__/" + name
        if mk not in opt_entries or opt_entries[mk].shape != p.shape:
            raise CheckpointError(f"optimizer moment missing or mis-shaped for {name}")
        m.append(opt_entries[mk].astype(p.dtype).copy())
        v.append(opt_entries[vk].astype(p.dtype).copy())
    optimizer.state.m, optimizer.state.v = m, v
    optimizer.state.step = int(opt_entries["__adam_step__"][0])
    optimizer.lr = float(opt_entries["__adam_lr__"][0])
