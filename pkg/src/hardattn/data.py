"""Datasets: the synthetic localized-glyph generator and raw-format readers.

Images are kept as uint8 arrays of shape (N, C, H, W); :func:`normalize`
maps them to [-1, 1] floats for the model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")

GLYPH_SIZE = 4
GLYPH_CELL = 4          # glyphs sit on the 4-pixel glimpse stride
GLYPH_VALUE = 235
RAMP_RADIUS = 40.0


class DataError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray   # (N, C, H, W) uint8
    y: np.ndarray   # (N,) int64

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"{self.x.shape[0]} images but {self.y.shape[0]} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, n: int) -> "Split":
        return Split(self.x[:n], self.y[:n])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (x, y) minibatches, shuffled when an rng is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int
    meta: dict

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def normalize(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Pixels in [0, 255] -> [-1, 1]."""
    return (np.asarray(x, dtype=dtype) / 127.5 - 1.0).astype(dtype)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def glyph_templates(num_classes: int = 10, size: int = GLYPH_SIZE, seed: int = 1234) -> np.ndarray:
    """Fixed binary glyphs, greedily chosen so that pairwise Hamming distances stay large."""
    rng = np.random.default_rng(seed)
    cands = rng.random((4096, size * size)) < 0.5
    chosen = [cands[0]]
    for _ in range(1, num_classes):
        dist = np.stack([(cands != c).sum(axis=1) for c in chosen]).min(axis=0)
        chosen.append(cands[int(np.argmax(dist))])
    return np.stack(chosen).reshape(num_classes, size, size)


def _glyph_cell_range(image_size: int) -> int:
    return (image_size - GLYPH_SIZE - 4) // GLYPH_CELL + 1


def generate_synthetic(spec: DatasetSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Localized-evidence images: one class glyph at a random grid cell amid clutter.

    The red and green channels carry the glyph (bright) and a few dimmer random
    distractor patterns; the blue channel carries a class-independent radial
    ramp centred on the glyph, so a single glimpse anywhere hints where to look.
    """
    if spec.image_size < 12 or spec.channels != 3:
        raise DataError("synthetic data needs 3 channels and image_size >= 12")
    if spec.num_classes < 2:
        raise DataError("synthetic data needs at least two classes")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    templates = glyph_templates(spec.num_classes)
    total = spec.n_train + spec.n_val + spec.n_test
    s = spec.image_size
    side = _glyph_cell_range(s)

    labels = rng.permutation(np.arange(total) % spec.num_classes)
    cells = rng.integers(0, side, size=(total, 2))
    x = rng.normal(40.0, 18.0, size=(total, 3, s, s))

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    n_distract = 3
    for i in range(total):
        r0, c0 = cells[i] * GLYPH_CELL + 2
        for _ in range(n_distract):
            dr, dc = rng.integers(0, s - GLYPH_SIZE + 1, size=2)
            pat = rng.random((GLYPH_SIZE, GLYPH_SIZE)) < 0.35
            x[i, :2, dr:dr + GLYPH_SIZE, dc:dc + GLYPH_SIZE] += 70.0 * pat
        glyph = templates[labels[i]]
        patch = x[i, :2, r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE]
        x[i, :2, r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE] = np.where(glyph, GLYPH_VALUE, patch * 0.5)
        cy, cx = r0 + GLYPH_SIZE / 2 - 0.5, c0 + GLYPH_SIZE / 2 - 0.5
        dist = np.hypot(yy - cy, xx - cx)
        x[i, 2] += 215.0 * np.maximum(0.0, 1.0 - dist / RAMP_RADIUS)
    x = np.clip(np.rint(x), 0, 255).astype(np.uint8)

    a, b = spec.n_train, spec.n_train + spec.n_val
    meta = dict(source="synthetic", seed=spec.seed, glyph_cells=cells)
    return Dataset(Split(x[:a], labels[:a].astype(np.int64)),
                   Split(x[a:b], labels[a:b].astype(np.int64)),
                   Split(x[b:], labels[b:].astype(np.int64)), spec.num_classes, meta)


# ---------------------------------------------------------------------------
# raw formats
# ---------------------------------------------------------------------------

def sha256_files(paths) -> str:
    digest = hashlib.sha256()
    for p in paths:
        digest.update(Path(p).read_bytes())
    return digest.hexdigest()


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian header, uint8 payload)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - head != count:
        raise DataError(f"{path}: header announces {count} values, file holds {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    head = bytes([0, 0, 0x08, arr.ndim]) + b"".join(int(n).to_bytes(4, "big") for n in arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_cifar_binary(path, image_size: int = 32, channels: int = 3) -> Split:
    """CIFAR-10 binary layout: records of one label byte followed by C*H*W pixels."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    stride = 1 + channels * image_size * image_size
    if raw.size == 0 or raw.size % stride:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {stride}-byte record")
    rec = raw.reshape(-1, stride)
    return Split(rec[:, 1:].reshape(-1, channels, image_size, image_size).copy(), rec[:, 0].astype(np.int64))


def write_cifar_binary(path, split: Split) -> None:
    x = np.ascontiguousarray(split.x, dtype=np.uint8).reshape(len(split), -1)
    if split.y.max(initial=0) > 255:
        raise DataError("CIFAR-binary labels must fit in one byte")
    rec = np.concatenate([split.y.astype(np.uint8)[:, None], x], axis=1)
    Path(path).write_bytes(rec.tobytes())


def read_image_dir(path, image_size: int, channels: int) -> tuple[Split, list[str]]:
    """``path/<class>/<image>`` tree; classes are the sorted subdirectory names."""
    from PIL import Image

    root = Path(path)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"{root}: no class subdirectories")
    mode = {1: "L", 3: "RGB"}[channels]
    xs, ys = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if not f.is_file():
                continue
            with Image.open(f) as im:
                im = im.convert(mode).resize((image_size, image_size))
                arr = np.asarray(im, dtype=np.uint8)
            xs.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
            ys.append(label)
    return Split(np.stack(xs), np.asarray(ys, dtype=np.int64)), classes


def _files_for(spec: DatasetSpec) -> list[Path]:
    root = Path(spec.path)
    if not root.exists():
        raise DataError(f"{root}: no such file or directory")
    if root.is_file():
        files = [root]
    else:
        files = sorted(p for p in root.rglob("*") if p.is_file())
    if spec.source == "idx" and root.is_file():
        files.append(Path(str(root).replace("images", "labels").replace("idx3", "idx1")))
    return files


def _split_pool(pool: Split, spec: DatasetSpec) -> tuple[Split, Split, Split]:
    need = spec.n_train + spec.n_val + spec.n_test
    if need > len(pool):
        raise DataError(f"{len(pool)} samples cannot fill splits of total size {need}")
    order = np.random.default_rng(spec.seed).permutation(len(pool))
    x, y = pool.x[order], pool.y[order]
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:need], y[b:need])


def ingest_raw(spec: DatasetSpec) -> Dataset:
    """Load an IDX pair, CIFAR-binary file(s) or an image directory.

    When ``spec.checksum`` is set it must equal the SHA-256 of the input
    files (sorted path order) or nothing is loaded. A CIFAR directory holding
    ``train.bin``, ``val.bin`` and ``test.bin`` keeps those splits; any other
    input is pooled, shuffled with ``spec.seed`` and cut to the split sizes.
    """
    files = _files_for(spec)
    if spec.checksum:
        got = sha256_files(files)
        if got != spec.checksum:
            raise DataError(f"checksum mismatch: expected {spec.checksum}, got {got}")
    meta = dict(source=spec.source, path=str(spec.path))
    root = Path(spec.path)
    if spec.source == "idx":
        img_file, lab_file = files if root.is_file() else _idx_pair(files)
        images, labels = read_idx(img_file), read_idx(lab_file)
        if images.ndim == 3:
            images = images[:, None]
        if images.shape[0] != labels.shape[0]:
            raise DataError("IDX image and label counts differ")
        pool = Split(images.copy(), labels.astype(np.int64))
    elif spec.source == "cifar":
        named = {p.stem: p for p in files if p.suffix == ".bin"}
        if root.is_dir() and all(s in named for s in SPLITS):
            parts = [read_cifar_binary(named[s], spec.image_size, spec.channels) for s in SPLITS]
            return Dataset(*parts, spec.num_classes, meta)
        bins = [p for p in files if p.suffix == ".bin"] or files
        chunks = [read_cifar_binary(p, spec.image_size, spec.channels) for p in bins]
        pool = Split(np.concatenate([c.x for c in chunks]), np.concatenate([c.y for c in chunks]))
    elif spec.source == "imagedir":
        pool, classes = read_image_dir(root, spec.image_size, spec.channels)
        meta["classes"] = classes
    else:
        raise DataError(f"ingest_raw cannot read source {spec.source!r}")
    if pool.y.max(initial=0) >= spec.num_classes:
        raise DataError(f"labels reach {pool.y.max()} but num_classes is {spec.num_classes}")
    return Dataset(*_split_pool(pool, spec), spec.num_classes, meta)


def _idx_pair(files: list[Path]) -> tuple[Path, Path]:
    imgs = [p for p in files if "images" in p.name]
    labs = [p for p in files if "labels" in p.name]
    if len(imgs) != 1 or len(labs) != 1:
        raise DataError("IDX directory must hold exactly one images file and one labels file")
    return imgs[0], labs[0]


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic":
        return generate_synthetic(spec)
    return ingest_raw(spec)


def write_dataset(ds: Dataset, out_dir) -> list[Path]:
    """Write each split as a CIFAR-binary file readable by :func:`ingest_raw`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        p = out / f"{name}.bin"
        write_cifar_binary(p, ds.split(name))
        paths.append(p)
    return paths
