"""Activation analyses steering the search: PCA scores, CKA, similarity.

The PCA score of an FFN hidden-state matrix is the fraction of dimensions
needed to reach a cumulative singular-value energy threshold tau: score
= k*/d with k* the smallest k whose top-k energy ratio is >= tau. Scores
live in (0, 1] and are comparable across blocks of different width; a
high score means the block is using most of its dimensions, which is the
growth signal.

Head similarity uses linear CKA on column-centered per-head outputs:
CKA(X, Y) = |Xc' Yc|_F^2 / (|Xc' Xc|_F * |Yc' Yc|_F). Block similarity
is the mean pairwise per-token cosine similarity of block outputs on
identical inputs.

All computations run in float64 regardless of training dtype.
"""

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, svd_spectrum
from .errors import ContractError

_CKA_EPS = 1e-12
_COS_EPS = 1e-12


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.astype(np.float64, copy=False)


def pca_score(f_hid, tau: float = 0.99) -> float:
    """Fraction of dimensions holding tau of the singular-value energy."""
    arr = _as_array(f_hid)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ContractError(
            f"pca_score expects [rows>=2, d], got shape {arr.shape}"
        )
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must be in (0, 1), got {tau}")
    d = arr.shape[1]
    centered = arr - arr.mean(axis=0, keepdims=True)
    s = svd_spectrum(centered)
    energy = s * s
    total = energy.sum()
    if total == 0.0:
        return 1.0 / d  # all-zero input: degenerate rank handling
    ratio = np.cumsum(energy) / total
    k_star = int(np.searchsorted(ratio, tau) + 1)
    k_star = min(k_star, d)
    return k_star / d


def linear_cka(x, y) -> float:
    """Linear CKA between two feature matrices with equal row counts."""
    xa, ya = _as_array(x), _as_array(y)
    if xa.ndim != 2 or ya.ndim != 2 or xa.shape[0] != ya.shape[0]:
        raise ContractError(
            f"linear_cka expects matching row counts, got {xa.shape} and "
            f"{ya.shape}"
        )
    xc = xa - xa.mean(axis=0, keepdims=True)
    yc = ya - ya.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(xc.T @ yc, "fro") ** 2
    nx = np.linalg.norm(xc.T @ xc, "fro")
    ny = np.linalg.norm(yc.T @ yc, "fro")
    return float(cross / (nx * ny + _CKA_EPS))


@dataclass
class CkaMatrix:
    """Symmetric unit-diagonal head-similarity matrix for one layer."""

    layer: int
    q: np.ndarray


def cka_heads(head_outputs, layer: int = 0) -> CkaMatrix:
    """Pairwise linear CKA between per-head output matrices."""
    if len(head_outputs) < 1:
        raise ContractError("cka_heads needs at least one head")
    rows = {np.asarray(h).shape[0] for h in head_outputs}
    if len(rows) != 1:
        raise ContractError(f"head output row counts differ: {sorted(rows)}")
    if rows.pop() < 2:
        raise ContractError("cka_heads needs at least 2 rows per head")
    h = len(head_outputs)
    q = np.ones((h, h), dtype=np.float64)
    for i in range(h):
        for j in range(i, h):
            v = linear_cka(head_outputs[i], head_outputs[j])
            q[i, j] = v
            q[j, i] = v
    return CkaMatrix(layer=layer, q=q)


def block_similarity(block_features) -> float:
    """Mean pairwise per-token cosine similarity across candidate blocks.

    `block_features` holds one [B, N, C] (or [rows, C]) array per block,
    all traced on identical inputs.
    """
    if len(block_features) < 2:
        raise ContractError("block_similarity needs at least 2 blocks")
    flats = []
    for f in block_features:
        arr = _as_array(f)
        flats.append(arr.reshape(-1, arr.shape[-1]))
    rows = {f.shape for f in flats}
    if len(rows) != 1:
        raise ContractError(f"block feature shapes differ: {sorted(rows)}")
    pair_means = []
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            a, b = flats[i], flats[j]
            dots = (a * b).sum(axis=1)
            norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            pair_means.append(float(np.mean(dots / (norms + _COS_EPS))))
    return float(np.mean(pair_means))


@dataclass
class PcaScoreTable:
    """epoch -> (layer, cand) -> (ffn_dim, score) rows, in insertion order."""

    rows: list = field(default_factory=list)

    def add(self, epoch: int, layer: int, cand: int, ffn_dim: int,
            score: float) -> None:
        if not 0.0 < score <= 1.0:
            raise ContractError(f"pca score {score} outside (0, 1]")
        self.rows.append((epoch, layer, cand, ffn_dim, score))

    def for_epoch(self, epoch: int) -> dict:
        return {(l, c): (d, s) for e, l, c, d, s in self.rows if e == epoch}


@dataclass
class SimilarityTable:
    """Per-layer mean pairwise block similarity rows."""

    rows: list = field(default_factory=list)

    def add(self, layer: int, pair_a: int, pair_b: int, value: float) -> None:
        self.rows.append((layer, pair_a, pair_b, value))


def _fmt(x) -> str:
    # repr of a python float round-trips the exact float64 value
    return repr(float(x))


def export_figure_data(obj, path) -> None:
    """Write analysis artifacts as CSV (UTF-8, LF), schema per type."""
    if isinstance(obj, PcaScoreTable):
        lines = ["epoch,layer,cand,ffn_dim,score"]
        for e, l, c, d, s in obj.rows:
            lines.append(f"{e},{l},{c},{d},{_fmt(s)}")
    elif isinstance(obj, CkaMatrix):
        lines = ["layer,i,j,value"]
        h = obj.q.shape[0]
        for i in range(h):
            for j in range(h):
                lines.append(f"{obj.layer},{i},{j},{_fmt(obj.q[i, j])}")
    elif isinstance(obj, SimilarityTable):
        lines = ["layer,pair_a,pair_b,value"]
        for l, a, b, v in obj.rows:
            lines.append(f"{l},{a},{b},{_fmt(v)}")
    else:
        raise ContractError(
            f"no figure-data schema for objects of type {type(obj).__name__}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
