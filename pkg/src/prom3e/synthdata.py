"""Synthetic aligned multimodal embeddings and the ``.pm3e`` dataset format.

Every species owns a latent factor. A record's embedding for modality ``m`` is

    normalize(tanh(A_m @ (factor + s_m * sqrt(rho) * g) + b_m) + s_m * sqrt(1 - rho) * n_m)

where ``A_m`` blends a map shared by all modalities with a private one
(``alignment``), ``b_m`` is a fixed per-modality offset that opens a modality
gap, ``g`` is per-record latent noise shared across modalities, ``n_m`` is
private noise and ``s_m`` is the modality's noise std. A positive
``view_rank`` restricts each modality to a random rank-r view of the latent. With the diversity
gradient on, species abundance flattens from west to east and the location
modality is driven by geographic Fourier features instead of the species
factor, so location-only inputs are more ambiguous where diversity is high.

File layout (little-endian, no padding)::

    b"PM3E" | u16 version=1 | u8 modality_count | modality_count x u32 dim
    | u32 species_count | u64 record_count
    | per record: u32 species_id, f32 lat, f32 lon, per modality dim x f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, SynthConfig, stream

MAGIC = b"PM3E"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    species: np.ndarray  # (N,) int64
    lat: np.ndarray  # (N,) float64
    lon: np.ndarray  # (N,) float64
    embeddings: list[np.ndarray]  # per modality (N, D_m) float64
    species_count: int

    def __len__(self) -> int:
        return len(self.species)

    @property
    def modality_count(self) -> int:
        return len(self.embeddings)

    @property
    def dims(self) -> list[int]:
        return [e.shape[1] for e in self.embeddings]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.species[idx],
            self.lat[idx],
            self.lon[idx],
            [e[idx] for e in self.embeddings],
            self.species_count,
        )


def _geo_features(lat, lon, proj: np.ndarray) -> np.ndarray:
    x = np.stack([np.radians(lat), np.radians(lon)], axis=1) @ proj
    return np.concatenate([np.sin(x), np.cos(x)], axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset for ``config``."""
    config.validate()
    S, N, L, M, D = config.species, config.records, config.latent_dim, config.modality_count, config.d_in
    if N < S:
        raise ConfigError(f"records ({N}) < species ({S}): every species must appear")

    maps_rng = stream(config.map_seed, "maps")
    shared_map = maps_rng.normal(size=(D, L))
    a = config.alignment
    maps = [
        (np.sqrt(a) * shared_map + np.sqrt(1 - a) * maps_rng.normal(size=(D, L))) / np.sqrt(L)
        for _ in range(M)
    ]
    offsets = [config.modality_offset * _unit(maps_rng.normal(size=D)) for _ in range(M)]
    if config.view_rank:
        for m in range(M):
            basis, _ = np.linalg.qr(maps_rng.normal(size=(L, config.view_rank)))
            maps[m] = maps[m] @ (basis @ basis.T) * np.sqrt(L / config.view_rank)
    geo_proj = maps_rng.normal(scale=4.0, size=(2, L // 2 + 1))
    geo_map = maps_rng.normal(size=(2 * (L // 2 + 1), L)) / np.sqrt(L // 2 + 1)

    rng = stream(config.seed, "data")
    factors = rng.normal(size=(S, L))
    lat = rng.uniform(config.lat_min, config.lat_max, size=N)
    lon = rng.uniform(config.lon_min, config.lon_max, size=N)

    if config.diversity_gradient:
        t = (lon - config.lon_min) / (config.lon_max - config.lon_min)
        sharpness = 6.0 * (1.0 - t)[:, None] * np.arange(S)[None, :] / max(S - 1, 1)
        logits = -sharpness * 3.0
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.uniform(size=N)
        species = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), S - 1)
        # every class must appear: reassign the easternmost records of the most common class
        east_first = np.argsort(-lon, kind="stable")
        for s in range(S):
            if not np.any(species == s):
                counts = np.bincount(species, minlength=S)
                donor = int(np.argmax(counts))
                j = next(i for i in east_first if species[i] == donor)
                species[j] = s
    else:
        species = rng.permutation(np.arange(N) % S)
    species = species.astype(np.int64)

    shared = rng.normal(size=(N, L))
    location_m = 2 if M > 2 else None
    embeddings = []
    for m in range(M):
        s_m = config.noise_for(m)
        if config.diversity_gradient and m == location_m:
            base = _geo_features(lat, lon, geo_proj) @ geo_map
        else:
            base = factors[species]
        private = rng.normal(size=(N, D))
        latent = base + s_m * np.sqrt(config.shared_noise) * shared
        u = np.tanh(latent @ maps[m].T + offsets[m]) + s_m * np.sqrt(1 - config.shared_noise) * private
        embeddings.append(_unit(u))
    return Dataset(species, lat, lon, embeddings, S)


# binary format -----------------------------------------------------------------


def _record_dtype(dims) -> np.dtype:
    fields = [("species", "<u4"), ("lat", "<f4"), ("lon", "<f4")]
    fields += [(f"m{i}", "<f4", (d,)) for i, d in enumerate(dims)]
    return np.dtype(fields)


def to_bytes(ds: Dataset) -> bytes:
    dims = ds.dims
    header = MAGIC + struct.pack("<HB", VERSION, ds.modality_count)
    header += struct.pack(f"<{len(dims)}I", *dims)
    header += struct.pack("<IQ", ds.species_count, len(ds))
    body = np.empty(len(ds), dtype=_record_dtype(dims))
    body["species"] = ds.species
    body["lat"] = ds.lat
    body["lon"] = ds.lon
    for i, e in enumerate(ds.embeddings):
        body[f"m{i}"] = e
    return header + body.tobytes()


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 7:
        raise TruncatedError(f"header truncated: got {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HB", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, reader supports {VERSION}")
    head = 7 + 4 * count + 12
    if len(buf) < head:
        raise TruncatedError(f"header truncated: expected {head} bytes, got {len(buf)}")
    dims = list(struct.unpack_from(f"<{count}I", buf, 7))
    species_count, n = struct.unpack_from("<IQ", buf, 7 + 4 * count)
    dtype = _record_dtype(dims)
    expected = head + n * dtype.itemsize
    if len(buf) < expected:
        raise TruncatedError(f"payload truncated: expected {expected} bytes for {n} records, got {len(buf)}")
    if len(buf) > expected:
        raise DatasetFormatError(f"trailing data: expected {expected} bytes, got {len(buf)}")
    body = np.frombuffer(buf, dtype=dtype, count=n, offset=head)
    return Dataset(
        body["species"].astype(np.int64),
        body["lat"].astype(np.float64),
        body["lon"].astype(np.float64),
        [body[f"m{i}"].astype(np.float64) for i in range(count)],
        species_count,
    )


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def read_dataset(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


# splitting ---------------------------------------------------------------------


def _split_sizes(n: int, fractions) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Disjoint, exhaustive, species-stratified split.

    Records are shuffled within each species and given the key
    ``(rank + 0.5) / species_size``; the globally sorted key sequence is then
    cut at the exact split sizes, so every species is spread across splits in
    proportion to ``fractions`` (within one record).
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    sizes = _split_sizes(len(ds), fractions)
    if min(sizes) == 0:
        raise ValueError(f"split sizes {sizes} for {len(ds)} records: a split would be empty")

    rng = stream(seed, "split")
    key = np.empty(len(ds))
    tiebreak = rng.permutation(len(ds))
    for s in np.unique(ds.species):
        members = np.flatnonzero(ds.species == s)
        ranks = rng.permutation(len(members))
        key[members] = (ranks + 0.5) / len(members)
    order = np.lexsort((tiebreak, key))
    bounds = np.cumsum([0] + sizes)
    return tuple(ds.subset(np.sort(order[bounds[i] : bounds[i + 1]])) for i in range(len(sizes)))
