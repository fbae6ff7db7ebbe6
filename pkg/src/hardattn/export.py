"""Writing evaluation results to disk: CSVs, EIG-map images and glimpse-trace figures.

Every writer is deterministic in its inputs, so exporting the same report
twice yields byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .data import normalize
from .evaluate import EvalReport
from .perception import GlimpseGrid


class ExportError(OSError):
    pass


def _writable(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create {out}: {exc}") from exc
    if not out.is_dir():
        raise ExportError(f"{out} is not a directory")
    probe = out / ".write-test"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ExportError(f"{out} is not writable: {exc}") from exc
    return out


def _write_text(path: Path, rows) -> Path:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue())
    return path


def write_metrics_csv(reports: list[EvalReport], path) -> Path:
    """One row per (policy, t): accuracy, entropy and observed-area fraction."""
    rows = [("policy", "t", "accuracy", "entropy", "area")]
    for rep in reports:
        for t in range(rep.T):
            rows.append((rep.policy, t, f"{rep.accuracy[t]:.6f}", f"{rep.entropy[t]:.6f}",
                         f"{rep.area[t]:.6f}"))
    return _write_text(Path(path), rows)


def write_confusion_csv(report: EvalReport, path) -> Path:
    k = report.confusion.shape[0]
    rows = [("true\\pred",) + tuple(range(k))]
    rows += [(i,) + tuple(int(v) for v in report.confusion[i]) for i in range(k)]
    return _write_text(Path(path), rows)


def eig_to_gray(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalise a raw EIG grid to uint8; a constant grid maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    return np.rint(scaled * 255).astype(np.uint8), lo, hi


def write_eig_pgm(values: np.ndarray, path) -> tuple[Path, Path]:
    """Binary PGM of one EIG map (grid resolution) plus a CSV of the raw values.

    The PGM header carries the raw range as a comment; the sidecar CSV holds
    the unnormalised grid row by row.
    """
    gray, lo, hi = eig_to_gray(values)
    h, w = gray.shape
    path = Path(path)
    header = f"P5\n# eig min-max normalised; raw_min={lo:.9g} raw_max={hi:.9g}\n{w} {h}\n255\n"
    path.write_bytes(header.encode("ascii") + gray.tobytes())
    side = path.with_suffix(".csv")
    _write_text(side, [[f"{x:.9g}" for x in row] for row in np.asarray(values, dtype=np.float64)])
    return path, side


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].split(b"#", 1)[0].split()
        fields += line
        pos = end + 1
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w)


def _figure_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    return buf.getvalue()


def plot_trace_overlay(image: np.ndarray, trace, grid: GlimpseGrid, path, title: str = "") -> Path:
    """The image with each attended glimpse outlined and numbered by step."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.patches as patches
    import matplotlib.pyplot as plt

    img = (normalize(image) + 1.0) / 2.0
    img = img.transpose(1, 2, 0) if img.shape[0] in (3, 4) else img[0]
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(img, cmap=None if img.ndim == 3 else "gray", interpolation="nearest")
    colors = plt.cm.viridis(np.linspace(0, 1, len(trace)))
    for t, cell in enumerate(trace):
        r, c = grid.top_left(int(cell))
        ax.add_patch(patches.Rectangle((c - 0.5, r - 0.5), grid.glimpse_size, grid.glimpse_size,
                                       fill=False, edgecolor=colors[t], linewidth=1.5))
        ax.text(c + 0.5, r + 2.0, str(t), color=colors[t], fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.write_bytes(_figure_bytes(fig))
    plt.close(fig)
    return path


def plot_accuracy(reports: list[EvalReport], path, extra: dict | None = None) -> Path:
    """Accuracy against t for each policy; ``extra`` adds horizontal reference lines."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for rep in reports:
        ax.plot(np.arange(rep.T), rep.accuracy, marker="o", label=rep.policy)
    for name, value in (extra or {}).items():
        ax.axhline(value, linestyle="--", linewidth=1, label=name, color="gray")
    ax.set_xlabel("t")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.write_bytes(_figure_bytes(fig))
    plt.close(fig)
    return path


def export_artifacts(reports: list[EvalReport], out_dir, grid: GlimpseGrid,
                     images: np.ndarray | None = None, num_examples: int = 4,
                     bounds: dict | None = None) -> list[Path]:
    """Metrics and confusion CSVs, EIG maps for the first examples, trace overlays and a plot."""
    if not reports:
        raise ExportError("nothing to export")
    out = _writable(out_dir)
    paths = [write_metrics_csv(reports, out / "metrics.csv")]
    for rep in reports:
        paths.append(write_confusion_csv(rep, out / f"confusion_{rep.policy}.csv"))
        maps = rep.eig_maps()
        n = min(num_examples, len(rep.traces))
        if maps is not None:
            for i in range(n):
                for t in range(maps.shape[1]):
                    stem = out / f"eig_{rep.policy}_img{i:03d}_t{t + 1}.pgm"
                    paths.extend(write_eig_pgm(maps[i, t].reshape(grid.side, grid.side), stem))
        if images is not None:
            for i in range(n):
                title = f"{rep.policy}: y={rep.labels[i]} pred={rep.predictions[i, -1]}"
                paths.append(plot_trace_overlay(images[i], rep.traces[i], grid,
                                                out / f"trace_{rep.policy}_img{i:03d}.png", title))
    paths.append(plot_accuracy(reports, out / "accuracy.png", bounds))
    return paths
