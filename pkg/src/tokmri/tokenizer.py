"""Patch tokenizer: affine encoder/decoder plus a k-means codebook.

One tokenizer serves both the real and imaginary channels.  The encoder and
decoder are single affine maps per patch, fit by least squares (PCA), which
keeps the quantizer's gradient path analyzable while exposing the full
encode / quantize / decode interface the rest of the pipeline needs.

Channels are normalized to zero mean, unit std per image before encoding;
the stats are returned so reconstruction can invert them.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDataError,
    GeometryError,
    InvalidInputError,
    NotTrainedError,
    ShapeMismatchError,
)
from .storage import atomic_write_text, read_json

CHANNEL_NORM_EPS = 1e-12


@dataclass(frozen=True)
class Codebook:
    """K discrete latent vectors of dimension D."""

    entries: np.ndarray  # (K, D)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise InvalidInputError("codebook entries must be a K×D matrix")
        if not np.all(np.isfinite(entries)):
            raise InvalidInputError("codebook entries must be finite")
        if np.unique(entries, axis=0).shape[0] != entries.shape[0]:
            raise InvalidInputError("codebook entries must be pairwise distinct")
        object.__setattr__(self, "entries", entries)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class LatentGrid:
    """L×D latent vectors laid out on a (grid_h, grid_w) patch grid."""

    vectors: np.ndarray  # (L, D)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != self.grid_h * self.grid_w:
            raise ShapeMismatchError(
                f"latent vectors {vectors.shape} do not match grid "
                f"{self.grid_h}×{self.grid_w}"
            )
        object.__setattr__(self, "vectors", vectors)

    @property
    def L(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ChannelStats:
    """Per-image normalization record: x_norm = (x - mean) / std."""

    mean: float
    std: float


def channel_stats(channel: np.ndarray) -> ChannelStats:
    """Population mean/std of one real channel, std floored away from zero."""
    x = np.asarray(channel, dtype=np.float64)
    mu = float(np.mean(x))
    std = float(np.sqrt(np.var(x) + CHANNEL_NORM_EPS))
    return ChannelStats(mean=mu, std=std)


def normalize_channel(channel: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (np.asarray(channel, dtype=np.float64) - stats.mean) / stats.std


def denormalize_channel(channel: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return np.asarray(channel, dtype=np.float64) * stats.std + stats.mean


def patchify(img_channel: np.ndarray, p: int) -> np.ndarray:
    """Row-major non-overlapping p×p patches, flattened to length p²."""
    x = np.asarray(img_channel, dtype=np.float64)
    if x.ndim != 2:
        raise GeometryError(f"expected a 2D channel, got shape {x.shape}")
    h, w = x.shape
    if h % p or w % p:
        raise GeometryError(f"patch size {p} does not divide image {h}×{w}")
    gh, gw = h // p, w // p
    return x.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)


def unpatchify(patches: np.ndarray, grid_h: int, grid_w: int, p: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (grid_h * grid_w, p * p):
        raise GeometryError(
            f"patches {patches.shape} do not match grid {grid_h}×{grid_w}, p={p}"
        )
    return (
        patches.reshape(grid_h, grid_w, p, p)
        .transpose(0, 2, 1, 3)
        .reshape(grid_h * p, grid_w * p)
    )


def nearest_entry_indices(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest entry per row; ties go to the lowest index.

    Uses the |v|^2 - 2 v.e + |e|^2 expansion (one matmul) rather than
    materializing all pairwise differences.
    """
    d2 = (
        np.sum(vectors * vectors, axis=1)[:, None]
        - 2.0 * vectors @ entries.T
        + np.sum(entries * entries, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)  # argmin takes the first (lowest) index


def quantize(lat: LatentGrid, cb: Codebook) -> tuple[np.ndarray, LatentGrid]:
    """Snap each latent to its L2-nearest codebook entry.

    Ties break to the lowest index.  Returns (indices, snapped grid).
    """
    if lat.D != cb.D:
        raise ShapeMismatchError(
            f"latent dimension {lat.D} != codebook dimension {cb.D}"
        )
    indices = nearest_entry_indices(lat.vectors, cb.entries)
    return indices, LatentGrid(cb.entries[indices], lat.grid_h, lat.grid_w)


def ste_quantize_grad(upstream_grad: np.ndarray) -> np.ndarray:
    """Straight-through rule: the quantizer's backward is the identity."""
    return np.asarray(upstream_grad)


class Tokenizer:
    """Affine patch encoder + codebook + affine decoder."""

    def __init__(self, p, enc_w=None, enc_b=None, dec_w=None, dec_b=None,
                 codebook=None):
        self.p = int(p)
        self.enc_w = None if enc_w is None else np.asarray(enc_w, dtype=np.float64)
        self.enc_b = None if enc_b is None else np.asarray(enc_b, dtype=np.float64)
        self.dec_w = None if dec_w is None else np.asarray(dec_w, dtype=np.float64)
        self.dec_b = None if dec_b is None else np.asarray(dec_b, dtype=np.float64)
        self.codebook = codebook

    @property
    def is_trained(self) -> bool:
        return all(
            v is not None
            for v in (self.enc_w, self.enc_b, self.dec_w, self.dec_b, self.codebook)
        )

    @property
    def D(self) -> int:
        self._require_trained()
        return self.enc_w.shape[0]

    def _require_trained(self):
        if not self.is_trained:
            raise NotTrainedError("tokenizer has no trained weights")

    def encode(self, img_channel: np.ndarray) -> LatentGrid:
        """Affine projection of each patch to D latent dims."""
        self._require_trained()
        x = np.asarray(img_channel, dtype=np.float64)
        gh, gw = x.shape[0] // self.p, x.shape[1] // self.p
        patches = patchify(x, self.p)
        return LatentGrid(patches @ self.enc_w.T + self.enc_b, gh, gw)

    def decode(self, lat: LatentGrid) -> np.ndarray:
        """Affine map back to patches, then reassembly to an image channel."""
        self._require_trained()
        patches = lat.vectors @ self.dec_w.T + self.dec_b
        return unpatchify(patches, lat.grid_h, lat.grid_w, self.p)

    def quantize(self, lat: LatentGrid) -> tuple[np.ndarray, LatentGrid]:
        self._require_trained()
        return quantize(lat, self.codebook)

    def save(self, path: str | Path) -> None:
        self._require_trained()
        obj = {
            "K": self.codebook.K,
            "D": self.D,
            "p": self.p,
            "entries": _encode_f64(self.codebook.entries),
            "enc_w": _encode_f64(self.enc_w),
            "enc_b": _encode_f64(self.enc_b),
            "dec_w": _encode_f64(self.dec_w),
            "dec_b": _encode_f64(self.dec_b),
        }
        atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        obj = read_json(path)
        K, D, p = int(obj["K"]), int(obj["D"]), int(obj["p"])
        return cls(
            p=p,
            enc_w=_decode_f64(obj["enc_w"], (D, p * p)),
            enc_b=_decode_f64(obj["enc_b"], (D,)),
            dec_w=_decode_f64(obj["dec_w"], (p * p, D)),
            dec_b=_decode_f64(obj["dec_b"], (p * p,)),
            codebook=Codebook(_decode_f64(obj["entries"], (K, D))),
        )


def _encode_f64(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
    ).decode("ascii")


def _decode_f64(text: str, shape) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(text), dtype="<f8")
    return flat.reshape(shape).astype(np.float64)


def kmeans(
    data: np.ndarray,
    K: int,
    iters: int = 50,
    seed: int = 0,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid.  Stops after `iters` rounds or when the relative distortion
    change drops below `tol`.  Returns (centroids, assignments, trace of
    the objective after each update).
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if K > n:
        raise ConfigError(f"cannot fit K={K} centroids to {n} points")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((K, data.shape[1]), dtype=np.float64)
    centroids[0] = data[rng.integers(n)]
    closest = np.sum((data - centroids[0]) ** 2, axis=1)
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centroids; pick any
            centroids[k] = data[rng.integers(n)]
            continue
        probs = closest / total
        centroids[k] = data[rng.choice(n, p=probs)]
        closest = np.minimum(closest, np.sum((data - centroids[k]) ** 2, axis=1))

    trace: list[float] = []
    prev = np.inf
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        d2 = (
            np.sum(data**2, axis=1)[:, None]
            - 2.0 * data @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        obj = float(np.sum(np.take_along_axis(d2, assign[:, None], axis=1)))
        # recompute distortion exactly (the expansion above can go slightly
        # negative from cancellation)
        obj = float(np.sum((data - centroids[assign]) ** 2))
        trace.append(obj)
        for k in range(K):
            sel = assign == k
            if np.any(sel):
                centroids[k] = data[sel].mean(axis=0)
            else:
                far = int(np.argmax(np.sum((data - centroids[assign]) ** 2, axis=1)))
                centroids[k] = data[far]
                assign[far] = k
        if prev - obj <= tol * max(prev, 1.0):
            break
        prev = obj
    return centroids, assign, trace


def train_tokenizer(
    dataset,
    K: int,
    D: int,
    p: int,
    iters: int = 50,
    seed: int = 0,
) -> tuple[Tokenizer, dict]:
    """Fit the affine encoder/decoder and the codebook.

    `dataset` is a sequence of real 2D channels (already normalized by the
    caller when that is desired).  The encoder/decoder solve the rank-D
    least-squares patch autoencoding problem (PCA); the codebook is k-means
    over the encoded training latents.
    """
    channels = [np.asarray(c, dtype=np.float64) for c in dataset]
    if not channels:
        raise ConfigError("training dataset is empty")
    patches = np.concatenate([patchify(c, p) for c in channels], axis=0)
    if K > patches.shape[0]:
        raise ConfigError(f"K={K} exceeds the {patches.shape[0]} training patches")
    if D > p * p:
        raise ConfigError(f"latent dimension {D} exceeds patch dimension {p * p}")

    mean = patches.mean(axis=0)
    centered = patches - mean
    if float(np.max(np.abs(centered))) < 1e-12:
        raise DegenerateDataError("all training patches are identical")

    # Best rank-D affine autoencoder: principal components of the patches.
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:D]  # (D, p*p)
    enc_w = comps
    enc_b = -comps @ mean
    dec_w = comps.T
    dec_b = mean

    latents = centered @ comps.T
    centroids, assign, trace = kmeans(latents, K, iters=iters, seed=seed)
    centroids = _dedupe_centroids(centroids, latents, rng=np.random.default_rng(seed))

    tok = Tokenizer(
        p=p, enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b,
        codebook=Codebook(centroids),
    )
    recon = latents @ dec_w.T + dec_b
    report = {
        "n_patches": int(patches.shape[0]),
        "recon_mse": float(np.mean((recon - patches) ** 2)),
        "quant_distortion": float(
            np.mean(np.sum((latents - centroids[assign]) ** 2, axis=1))
        ),
        "kmeans_trace": trace,
    }
    return tok, report


def _dedupe_centroids(centroids, latents, rng):
    """Guarantee pairwise-distinct codebook entries.

    Duplicate centroids can only appear on degenerate data; nudge them
    toward distinct data points, falling back to tiny jitter.
    """
    for _ in range(8):
        _, first = np.unique(centroids, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(centroids.shape[0]), first)
        if dup.size == 0:
            return centroids
        for k in dup:
            centroids[k] = latents[rng.integers(latents.shape[0])]
    _, first = np.unique(centroids, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(centroids.shape[0]), first)
    for k in dup:
        centroids[k] = centroids[k] + rng.normal(scale=1e-9, size=centroids.shape[1])
    return centroids
