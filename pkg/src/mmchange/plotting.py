"""Report figures rendered to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .grouping import Correspondence, MatchMatrix  # noqa: E402
from .segmentation import Segment  # noqa: E402

KIND_COLOURS = {"moved": "tab:blue", "added": "tab:green", "removed": "tab:red"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_change_topdown(
    background: np.ndarray,
    segments: Sequence[Segment],
    correspondences: Sequence[Correspondence],
    path,
) -> Path:
    """Bird's-eye view: map in grey, change segments coloured by their fate."""
    kind_of: Dict[str, str] = {}
    for c in correspondences:
        for sid in (c.object_a, c.object_b):
            if sid is not None:
                kind_of[sid] = c.kind
    centroid = {s.segment_id: s.centroid for s in segments}
    fig, ax = plt.subplots(figsize=(8, 6))
    if len(background):
        ax.scatter(background[:, 0], background[:, 1], s=0.5, c="0.6", linewidths=0)
    for s in segments:
        p = s.cloud.points
        colour = KIND_COLOURS.get(kind_of.get(s.segment_id, ""), "tab:gray")
        ax.scatter(p[:, 0], p[:, 1], s=1, c=colour, linewidths=0)
        ax.annotate(s.segment_id, s.centroid[:2], fontsize=7)
    for c in correspondences:
        if c.kind == "moved" and c.object_a in centroid and c.object_b in centroid:
            a, b = centroid[c.object_a], centroid[c.object_b]
            ax.annotate("", b[:2], a[:2], arrowprops=dict(arrowstyle="->", color="tab:blue"))
    for kind, colour in KIND_COLOURS.items():
        ax.scatter([], [], c=colour, label=kind)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("Detected changes")
    return _save(fig, path)


def plot_match_matrix(mm: MatchMatrix, path) -> Path:
    """Pair confidences, one block per descriptor class."""
    ids_a, ids_b = [], []
    for c in sorted(mm.classes):
        a, b, _ = mm.classes[c]
        ids_a += a
        ids_b += b
    M = np.full((len(ids_a), len(ids_b)), np.nan)
    ra, rb = {s: i for i, s in enumerate(ids_a)}, {s: j for j, s in enumerate(ids_b)}
    for _, a, b, conf in mm.rows():
        M[ra[a], rb[b]] = conf
    fig, ax = plt.subplots(figsize=(1 + 0.5 * max(len(ids_b), 2), 1 + 0.4 * max(len(ids_a), 2)))
    im = ax.imshow(M, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(ids_b)), ids_b, rotation=90, fontsize=7)
    ax.set_yticks(range(len(ids_a)), ids_a, fontsize=7)
    ax.set_xlabel("mission B objects")
    ax.set_ylabel("mission A objects")
    fig.colorbar(im, ax=ax, label="pair confidence")
    return _save(fig, path)


def plot_wcss(curve: Optional[np.ndarray], k_star: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if curve is not None and len(curve):
        ks = np.arange(1, len(curve) + 1)
        ax.plot(ks, curve, "o-")
        ax.axvline(k_star, color="tab:red", ls="--", label=f"K* = {k_star}")
        ax.legend()
    ax.set_xlabel("K")
    ax.set_ylabel("WCSS")
    return _save(fig, path)


def plot_descriptor_pca(descriptors: np.ndarray, classes: np.ndarray, ids: Sequence[str], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    if len(descriptors) >= 2:
        X = descriptors - descriptors.mean(axis=0)
        _, _, Vt = np.linalg.svd(X, full_matrices=False)
        Y = X @ Vt[:2].T if Vt.shape[0] >= 2 else np.c_[X @ Vt[0], np.zeros(len(X))]
        sc = ax.scatter(Y[:, 0], Y[:, 1], c=classes, cmap="tab10", s=25)
        for y, sid in zip(Y, ids):
            ax.annotate(sid, y, fontsize=6)
        fig.colorbar(sc, ax=ax, label="class")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    return _save(fig, path)
