"""Embedding geometry diagnostics and 2-D projection.

The reference reducer is PCA on the sample correlation matrix of the
embeddings (unit-variance scaling), which makes the isotropy check exact:
perfectly decorrelated standardized embeddings put every eigenvalue at 1,
i.e. an eigenvalue fraction of exactly 1/D. A well-trained
redundancy-reduction model approaches that; a collapsed one concentrates
variance in its top component instead.

Externally computed 2-D coordinates (e.g. from a nonlinear reducer) can be
imported and colored the same way as PCA output.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .change import EmbeddingStore
from .errors import AnalyticsError


@dataclass
class PCAResult:
    coords: np.ndarray        # (N, k) projections on the top-k eigenvectors
    eigenvalues: np.ndarray   # all kept-dimension eigenvalues, descending
    eigenvectors: np.ndarray  # (D_kept, k), column i pairs with eigenvalue i
    kept_dims: np.ndarray     # indices of non-constant embedding dimensions
    n_samples: int


def _standardize(embeddings: np.ndarray):
    x = np.asarray(embeddings, dtype=np.float64)
    x = x - x.mean(axis=0)
    std = x.std(axis=0, ddof=1)
    keep = std > 0.0
    if not keep.all():
        dropped = np.flatnonzero(~keep)
        warnings.warn(
            f"dropping {dropped.size} constant embedding dimension(s): {dropped[:8].tolist()}",
            RuntimeWarning,
            stacklevel=3,
        )
    if not keep.any():
        raise AnalyticsError("all embedding dimensions are constant")
    return x[:, keep] / std[keep], np.flatnonzero(keep)


def pca_project(store: EmbeddingStore | np.ndarray, k: int) -> PCAResult:
    """Project standardized embeddings onto the top-k principal axes.

    Eigenvectors come from the sample correlation matrix; constant
    dimensions are dropped with a warning. Requires N > k >= 1.
    """
    emb = store.embeddings if isinstance(store, EmbeddingStore) else np.asarray(store)
    n = emb.shape[0]
    if k < 1:
        raise AnalyticsError("k must be >= 1")
    if n <= k:
        raise AnalyticsError(f"need more samples than components (N={n}, k={k})")
    x, kept = _standardize(emb)
    if k > x.shape[1]:
        raise AnalyticsError(f"k={k} exceeds {x.shape[1]} usable dimensions")
    corr = (x.T @ x) / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(corr)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]
    coords = x @ eigenvectors[:, :k]
    return PCAResult(coords=coords, eigenvalues=eigenvalues,
                     eigenvectors=eigenvectors[:, :k], kept_dims=kept, n_samples=n)


@dataclass
class IsotropyReport:
    fraction_1: float   # top eigenvalue / D
    fraction_2: float   # second eigenvalue / D
    dim: int            # D after dropping constant dimensions
    n_samples: int
    eigenvalue_1: float
    eigenvalue_2: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def isotropy_report(store: EmbeddingStore | np.ndarray) -> IsotropyReport:
    """Top-two eigenvalue fractions of the embedding correlation matrix.

    The natural comparison point is 1/D: that is the fraction every
    eigenvalue takes when embedding dimensions are perfectly decorrelated.
    """
    emb = store.embeddings if isinstance(store, EmbeddingStore) else np.asarray(store)
    n, d_raw = emb.shape
    if n <= d_raw:
        warnings.warn(
            f"isotropy estimate is unreliable with N={n} <= D={d_raw}",
            RuntimeWarning,
            stacklevel=2,
        )
    x, _ = _standardize(emb)
    d = x.shape[1]
    if d < 2:
        raise AnalyticsError("need at least 2 non-constant dimensions")
    corr = (x.T @ x) / (n - 1)
    eigenvalues = np.sort(np.linalg.eigvalsh(corr))[::-1]
    return IsotropyReport(
        fraction_1=float(eigenvalues[0] / d),
        fraction_2=float(eigenvalues[1] / d),
        dim=d,
        n_samples=n,
        eigenvalue_1=float(eigenvalues[0]),
        eigenvalue_2=float(eigenvalues[1]),
    )


@dataclass
class ReducedCoords:
    pano_ids: list[str]
    coords: np.ndarray        # (N, 2)
    color_angles: np.ndarray  # (N,) in [0, 2*pi)
    reducer: str


def color_angles(coords: np.ndarray) -> np.ndarray:
    """Circular color assignment: angle of each point about the centroid."""
    coords = np.asarray(coords, dtype=np.float64)
    center = coords.mean(axis=0)
    rel = coords - center
    return np.arctan2(rel[:, 1], rel[:, 0]) % (2.0 * math.pi)


def reduced_coords(store: EmbeddingStore, result: PCAResult, reducer: str = "pca") -> ReducedCoords:
    if result.coords.shape[1] < 2:
        uv = np.column_stack([result.coords[:, 0], np.zeros(result.coords.shape[0])])
    else:
        uv = result.coords[:, :2]
    return ReducedCoords(
        pano_ids=[r.pano_id for r in store.rows],
        coords=uv,
        color_angles=color_angles(uv),
        reducer=reducer,
    )


@dataclass
class ImportOutcome:
    coords: ReducedCoords
    unmatched_file_ids: list[str]   # ids in the file but not the store
    unmatched_store_ids: list[str]  # store rows with no imported coords


def import_coords(path, store: EmbeddingStore, reducer: str = "imported") -> ImportOutcome:
    """Join an external ``pano_id,u,v`` CSV against a store.

    Duplicate ids in the file are an error; unmatched ids on either side
    are reported. Only matched rows appear in the result, in store order.
    """
    seen: dict[str, tuple[float, float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"pano_id", "u", "v"} <= set(reader.fieldnames):
            raise AnalyticsError(f"{path}: expected header pano_id,u,v")
        for rec in reader:
            pid = rec["pano_id"]
            if pid in seen:
                raise AnalyticsError(f"duplicate pano_id {pid!r} in {path}")
            seen[pid] = (float(rec["u"]), float(rec["v"]))
    if not seen:
        raise AnalyticsError(f"{path} contains no coordinate rows")
    store_ids = [r.pano_id for r in store.rows]
    matched = [pid for pid in store_ids if pid in seen]
    if not matched:
        raise AnalyticsError("no imported ids match the store")
    uv = np.array([seen[pid] for pid in matched], dtype=np.float64)
    coords = ReducedCoords(pano_ids=matched, coords=uv,
                           color_angles=color_angles(uv), reducer=reducer)
    store_set = set(store_ids)
    return ImportOutcome(
        coords=coords,
        unmatched_file_ids=sorted(set(seen) - store_set),
        unmatched_store_ids=[pid for pid in store_ids if pid not in seen],
    )


def write_coords_csv(path, coords: ReducedCoords) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pano_id", "u", "v", "color_angle_rad"])
        for pid, (u, v), angle in zip(coords.pano_ids, coords.coords, coords.color_angles):
            writer.writerow([pid, repr(float(u)), repr(float(v)), repr(float(angle))])


def write_spectrum_json(path, result: PCAResult) -> None:
    d = result.eigenvalues.size
    doc = {
        "n_samples": result.n_samples,
        "dim": d,
        "eigenvalues": [float(v) for v in result.eigenvalues],
        "fractions": [float(v / d) for v in result.eigenvalues],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
