"""Phoneme similarity maps and plot-data export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import LogMelSpectrogram
from .linguistic import VocabError
from .pipeline import Checkpoint


@dataclass(frozen=True)
class SimilarityMatrix:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray

    @property
    def nearest(self) -> dict:
        """Most similar column symbol for every row symbol."""
        return {r: self.cols[int(np.argmax(v))] for r, v in zip(self.rows, self.values)}


def embedding_rows(ckpt: Checkpoint, symbols: Sequence[str]) -> np.ndarray:
    table = ckpt.model.phoneme_embedding.weight.detach().double().numpy()
    idx = []
    for s in symbols:
        if s not in ckpt.vocab:
            raise VocabError(f"unknown phoneme {s!r}")
        idx.append(ckpt.vocab.id_of(s))
    return table[idx]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = a / np.linalg.norm(a, axis=1, keepdims=True)
    nb = b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.clip(na @ nb.T, -1.0, 1.0)


def phoneme_similarity(ckpt: Checkpoint, subset_a: Sequence[str], subset_b: Sequence[str]) -> SimilarityMatrix:
    """Cosine similarity between rows of the trained phoneme-embedding table."""
    values = cosine_matrix(embedding_rows(ckpt, subset_a), embedding_rows(ckpt, subset_b))
    return SimilarityMatrix(tuple(subset_a), tuple(subset_b), values)


def export_plot_data(data, csv_path, png_path=None, title: str | None = None) -> Path:
    """Write the raw values as CSV and, optionally, a heatmap image.

    Similarity matrices get a header of column symbols and a leading
    column of row symbols; spectrograms are written one frame per row.
    """
    if isinstance(data, SimilarityMatrix):
        values, rows, cols = data.values, data.rows, data.cols
    elif isinstance(data, LogMelSpectrogram):
        values, rows, cols = data.frames, None, [f"mel{k}" for k in range(data.frames.shape[1])]
    else:
        values = np.asarray(data, dtype=np.float64)
        rows, cols = None, [f"c{k}" for k in range(values.shape[1])]
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot export non-finite values")

    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(([""] if rows is not None else []) + list(cols))
        for k, v in enumerate(values):
            w.writerow(([rows[k]] if rows is not None else []) + [repr(float(x)) for x in v])

    if png_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5))
        if isinstance(data, LogMelSpectrogram):
            im = ax.imshow(values.T, origin="lower", aspect="auto")
            ax.set_xlabel("frame")
            ax.set_ylabel("mel bin")
        else:
            im = ax.imshow(values, aspect="auto")
            if rows is not None:
                ax.set_yticks(range(len(rows)), rows)
                ax.set_xticks(range(len(cols)), cols, rotation=90)
        fig.colorbar(im, ax=ax)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
    return csv_path


def read_plot_csv(path):
    """Inverse of :func:`export_plot_data` for the CSV part: ``(rows, cols, values)``."""
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    header = table[0]
    labelled = header and header[0] == ""
    cols = header[1:] if labelled else header
    rows = [r[0] for r in table[1:]] if labelled else None
    values = np.array([[float(x) for x in (r[1:] if labelled else r)] for r in table[1:]])
    return rows, cols, values
