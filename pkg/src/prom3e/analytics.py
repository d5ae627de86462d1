"""Uncertainty, modality-gap, species-diversity and rank-correlation analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.ndimage import correlate

from . import numerics as nx
from .model import ModelParams, VisibleSet, assemble_tokens, encode, forward, project
from .synthdata import Dataset


# scalar statistics -----------------------------------------------------------


def sigma_l1(log_var) -> np.ndarray | float:
    """L1 norm of the standard deviation, summed over the last axis."""
    s = np.exp(0.5 * np.asarray(log_var, dtype=np.float64)).sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def modality_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between the centroids of two embedding sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("modality_gap needs nonempty sets")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def shannon_index(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("shannon_index of all-zero counts is undefined")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _ranks(x: np.ndarray) -> np.ndarray:
    return stats.rankdata(x, method="average")


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if den == 0:
        raise ValueError("correlation undefined for a constant series")
    return float((xc * yc).sum() / den)


def spearman(x, y) -> tuple[float, float]:
    """Rank correlation (average ranks for ties) and two-sided t-approximation p-value."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D series of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 points")
    rho = pearson(_ranks(x), _ranks(y))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


# uncertainty -------------------------------------------------------------------


@dataclass
class UncertaintyReport:
    visible_sets: list[tuple[int, ...]]
    mean_sigma_l1: list[float]
    mean_mse: list[float]
    pearson: float = float("nan")
    spearman: float = float("nan")
    spearman_p: float = float("nan")


def uncertainty_sweep(params: ModelParams, ds: Dataset, visible_sets: Sequence[Sequence[int]], batch_size: int = 512) -> UncertaintyReport:
    """Mean ||sigma||_1 and masked-target MSE (epsilon = 0) per visible set.

    When every modality is visible there is nothing masked, so the MSE is
    taken over all modalities instead.
    """
    M = ds.modality_count
    sig, mse = [], []
    for visible in visible_sets:
        visible = tuple(sorted(set(visible)))
        targets = tuple(m for m in range(M) if m not in visible) or tuple(range(M))
        vs = VisibleSet(visible, targets)
        s_acc, e_acc = 0.0, 0.0
        for s in range(0, len(ds), batch_size):
            embs = [e[s : s + batch_size] for e in ds.embeddings]
            out = forward(params, embs, vs, rng=None)
            s_acc += float(sigma_l1(out.encoded.log_var.data).sum())
            for m in targets:
                diff = out.reconstructions[m].data - embs[m]
                e_acc += float((diff * diff).mean(axis=1).sum()) / len(targets)
        sig.append(s_acc / len(ds))
        mse.append(e_acc / len(ds))
    report = UncertaintyReport([tuple(sorted(set(v))) for v in visible_sets], sig, mse)
    if len(sig) >= 3 and np.ptp(sig) > 0 and np.ptp(mse) > 0:
        report.pearson = pearson(sig, mse)
        report.spearman, report.spearman_p = spearman(sig, mse)
    return report


# modality gap --------------------------------------------------------------------


@dataclass
class GapReport:
    pair: tuple[int, int]
    contexts: list[tuple[int, ...]]
    input_gap: float
    projected_gap: float
    hidden_gap: list[float] = field(default_factory=list)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def stage_representations(params: ModelParams, ds: Dataset, visible: Sequence[int], batch_size: int = 512) -> dict[str, dict[int, np.ndarray]]:
    """Per-modality token representations at the input, projected and hidden stages."""
    visible = sorted(set(visible))
    R = params.config.registers
    reps = {"input": {}, "projected": {}, "hidden": {}}
    for m in visible:
        reps["input"][m] = ds.embeddings[m]
    proj = {m: [] for m in visible}
    hid = {m: [] for m in visible}
    for s in range(0, len(ds), batch_size):
        embs = [e[s : s + batch_size] for e in ds.embeddings]
        for m in visible:
            proj[m].append(project(params, embs[m], m).data[:, 0, :])
        h = encode(params, assemble_tokens(params, embs, visible)).hidden.data
        for pos, m in enumerate(visible):
            hid[m].append(h[:, 2 + R + pos, :])
    for m in visible:
        reps["projected"][m] = np.concatenate(proj[m])
        reps["hidden"][m] = np.concatenate(hid[m])
    return reps


def gap_sweep(params: ModelParams, ds: Dataset, pair: tuple[int, int], context_sets: Sequence[Sequence[int]]) -> GapReport:
    """Centroid gap between the pair's unit-normalized representations at each stage.

    Each context set is the visible set used for the hidden stage and must
    contain both members of ``pair``.
    """
    a, b = pair
    contexts = [tuple(sorted(set(c) | {a, b})) for c in context_sets]
    reps = stage_representations(params, ds, contexts[0])
    report = GapReport(
        (a, b),
        contexts,
        modality_gap(_unit_rows(reps["input"][a]), _unit_rows(reps["input"][b])),
        modality_gap(_unit_rows(reps["projected"][a]), _unit_rows(reps["projected"][b])),
    )
    for ctx in contexts:
        h = stage_representations(params, ds, ctx)["hidden"]
        report.hidden_gap.append(modality_gap(_unit_rows(h[a]), _unit_rows(h[b])))
    return report


# diversity grid ------------------------------------------------------------------


@dataclass
class DiversityGrid:
    rows: int
    cols: int
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    present: np.ndarray  # (rows, cols) bool
    shannon: np.ndarray  # NaN where absent
    richness: np.ndarray
    sigma_l1: np.ndarray | None
    smoothing_sigma: float

    def cell_center(self, r: int, c: int) -> tuple[float, float]:
        lat_min, lat_max, lon_min, lon_max = self.bbox
        lat = lat_max - (r + 0.5) * (lat_max - lat_min) / self.rows
        lon = lon_min + (c + 0.5) * (lon_max - lon_min) / self.cols
        return float(lat), float(lon)

    def to_tsv(self) -> str:
        lines = ["row\tcol\tlat_center\tlon_center\tshannon\trichness\tsigma_l1"]
        for r, c in zip(*np.nonzero(self.present)):
            lat, lon = self.cell_center(r, c)
            sig = "" if self.sigma_l1 is None else repr(float(self.sigma_l1[r, c]))
            lines.append(
                f"{r}\t{c}\t{lat!r}\t{lon!r}\t{float(self.shannon[r, c])!r}\t{float(self.richness[r, c])!r}\t{sig}"
            )
        return "\n".join(lines) + "\n"


def cell_indices(lat, lon, rows: int, cols: int, bbox) -> tuple[np.ndarray, np.ndarray]:
    """Row 0 is the northern edge, column 0 the western edge; edges clip inward."""
    lat_min, lat_max, lon_min, lon_max = bbox
    r = np.floor((lat_max - np.asarray(lat)) / (lat_max - lat_min) * rows).astype(int)
    c = np.floor((np.asarray(lon) - lon_min) / (lon_max - lon_min) * cols).astype(int)
    return np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)


def gaussian_smooth(values: np.ndarray, present: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian kernel truncated at radius 3 sigma, renormalized over present cells."""
    if sigma <= 0:
        return values.copy()
    radius = int(math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(k1, k1)
    filled = np.where(present, values, 0.0)
    num = correlate(filled, kernel, mode="constant", cval=0.0)
    den = correlate(present.astype(np.float64), kernel, mode="constant", cval=0.0)
    out = np.full(values.shape, np.nan)
    out[present] = num[present] / den[present]
    return out


def location_sigma_l1(params: ModelParams, ds: Dataset, location: int = 2, batch_size: int = 512) -> np.ndarray:
    """Per-record ||sigma||_1 with only the location modality visible."""
    out = []
    for s in range(0, len(ds), batch_size):
        embs = [e[s : s + batch_size] for e in ds.embeddings]
        enc = encode(params, assemble_tokens(params, embs, [location]))
        out.append(sigma_l1(enc.log_var.data))
    return np.concatenate(out)


def build_diversity_grid(ds: Dataset, grid_dims=(25, 50), bbox=None, smoothing_sigma: float = 2.0, params: ModelParams | None = None, location: int = 2) -> DiversityGrid:
    """Per-cell Shannon index, species richness and (optionally) mean location ||sigma||_1."""
    if len(ds) == 0:
        raise ValueError("no records to grid")
    rows, cols = grid_dims
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dims must be positive, got {grid_dims}")
    if bbox is None:
        bbox = (float(ds.lat.min()), float(ds.lat.max()), float(ds.lon.min()), float(ds.lon.max()))
    lat_min, lat_max, lon_min, lon_max = bbox
    if not (lat_min < lat_max and lon_min < lon_max):
        raise ValueError(f"invalid bbox {bbox}")
    r, c = cell_indices(ds.lat, ds.lon, rows, cols, bbox)
    cell = r * cols + c
    present = np.zeros(rows * cols, dtype=bool)
    present[cell] = True
    shannon = np.full(rows * cols, np.nan)
    richness = np.full(rows * cols, np.nan)
    sig = None
    if params is not None:
        per_record = location_sigma_l1(params, ds, location)
        sig = np.full(rows * cols, np.nan)
    for k in np.unique(cell):
        members = cell == k
        counts = np.bincount(ds.species[members], minlength=ds.species_count)
        shannon[k] = shannon_index(counts)
        richness[k] = float(np.count_nonzero(counts))
        if sig is not None:
            sig[k] = float(per_record[members].mean())
    present = present.reshape(rows, cols)

    def smooth(v):
        return gaussian_smooth(v.reshape(rows, cols), present, smoothing_sigma)

    return DiversityGrid(
        rows,
        cols,
        tuple(float(x) for x in bbox),
        present,
        smooth(shannon),
        smooth(richness),
        None if sig is None else smooth(sig),
        smoothing_sigma,
    )


def grid_correlation(grid: DiversityGrid) -> tuple[float, float]:
    """Spearman correlation between the ||sigma||_1 map and the Shannon map over present cells."""
    if grid.sigma_l1 is None:
        raise ValueError("grid has no sigma map")
    return spearman(grid.sigma_l1[grid.present], grid.shannon[grid.present])
