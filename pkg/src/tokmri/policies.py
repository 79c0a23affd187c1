"""Sequential active acquisition and the line-selection policies.

One trajectory alternates measurement and decision: acquire the current
mask, reconstruct through the tokenizer + transformer, score every
phase-encoding line, add the best unacquired ones, repeat.  Three policies
are provided:

* ``random``  - uniform among unacquired lines (the non-adaptive baseline);
* ``les``     - project the upsampled token-entropy map into k-space and
  rank lines by mean magnitude;
* ``geo``     - rank lines by the summed magnitude of the gradient of the
  total token entropy w.r.t. the measured k-space.

``oracle`` short-circuits the loop entirely: it encodes and decodes the
fully sampled ground truth, bounding what the discrete latent pipeline can
achieve.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BudgetExhaustedError,
    ConfigError,
    GeometryError,
    ShapeMismatchError,
)
from .fourier import (
    NoiseSpec,
    SamplingMask,
    acquire,
    forward_fft,
    make_center_mask,
    sampling_budget,
    zero_fill,
)
from .gradients import (
    backward_to_kspace,
    line_gradient_scores,
    pipeline_forward,
    stream_entropy,
)
from .metrics import nmse
from .model import (
    LatentTransformer,
    TokenDistribution,
    predicted_tokens,
    reconstruct,
    tokenize_image,
)
from .tokenizer import Tokenizer

POLICIES = ("random", "les", "geo", "oracle")


@dataclass(frozen=True)
class AcquisitionConfig:
    R: int = 8
    rho_c: float = 0.04
    T: int = 4
    lines_per_step: int | None = None  # None: ceil(budget / T)
    policy: str = "les"
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.R < 1:
            raise ConfigError(f"acceleration must be >= 1, got {self.R}")
        if self.T < 0:
            raise ConfigError(f"step count must be >= 0, got {self.T}")
        if self.lines_per_step is not None and self.lines_per_step < 1:
            raise ConfigError("lines_per_step must be positive")


@dataclass
class StepRecord:
    step: int
    lines: list[int]
    mask: SamplingMask              # snapshot after this step's update
    scores: np.ndarray | None       # per-line score vector (None for random)
    nmse_before: float              # recon quality from the pre-step mask
    time_ms: float = 0.0


@dataclass
class AcquisitionTrajectory:
    policy: str
    steps: list[StepRecord] = field(default_factory=list)
    final_mask: SamplingMask | None = None
    final_nmse: float | None = None
    reconstruction: np.ndarray | None = None
    budget: int = 0


@dataclass(frozen=True)
class EntropyMap:
    """Latent-grid entropy, its image-size upsampling, and the k-space view."""

    h: np.ndarray         # (H/p, W/p)
    U_space: np.ndarray   # (H, W)
    U_kspace: np.ndarray  # (H, W), |FFT(U_space)|


def patch_entropy(dist_re: TokenDistribution, dist_im: TokenDistribution,
                  grid_h: int, grid_w: int) -> np.ndarray:
    """Per-position entropy (nats) summed over both streams, on the grid."""
    h = stream_entropy(dist_re) + stream_entropy(dist_im)
    if h.size != grid_h * grid_w:
        raise ShapeMismatchError(
            f"{h.size} positions do not fill a {grid_h}×{grid_w} grid"
        )
    return h.reshape(grid_h, grid_w)


def _axis_lerp(values: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = values.shape[axis]
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(int)
    t = src - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    a = np.take(values, lo_c, axis=axis)
    b = np.take(values, hi_c, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return a * (1.0 - t) + b * t


def upsample_bilinear(h: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel centers (align-corners false).

    Constant maps stay constant; edges clamp.
    """
    h = np.asarray(h, dtype=np.float64)
    gh, gw = h.shape
    if H % gh or W % gw:
        raise GeometryError(f"grid {gh}×{gw} does not divide image {H}×{W}")
    return _axis_lerp(_axis_lerp(h, H, axis=0), W, axis=1)


def entropy_map(dist_re: TokenDistribution, dist_im: TokenDistribution,
                grid_h: int, grid_w: int, H: int, W: int) -> EntropyMap:
    h = patch_entropy(dist_re, dist_im, grid_h, grid_w)
    u_space = upsample_bilinear(h, H, W)
    u_kspace = np.abs(forward_fft(u_space))
    return EntropyMap(h=h, U_space=u_space, U_kspace=u_kspace)


def _top_free_lines(scores: np.ndarray, acquired: SamplingMask,
                    n: int) -> list[int]:
    """Highest-scoring unacquired lines; equal scores go to lower indices."""
    if scores.shape != (acquired.num_lines,):
        raise ShapeMismatchError(
            f"score vector {scores.shape} vs {acquired.num_lines} lines"
        )
    free = acquired.free_indices()
    if free.size < n:
        raise BudgetExhaustedError(
            f"requested {n} lines but only {free.size} remain"
        )
    masked = np.where(acquired.flags, -np.inf, scores)
    order = np.argsort(-masked, kind="stable")
    return [int(j) for j in order[:n]]


def les_select(u_kspace: np.ndarray, acquired: SamplingMask, n: int) -> list[int]:
    """Top-n unacquired lines by mean k-space magnitude of the entropy map."""
    return _top_free_lines(
        np.asarray(u_kspace, dtype=np.float64).mean(axis=1), acquired, n
    )


def geo_select(line_scores: np.ndarray, acquired: SamplingMask,
               n: int) -> list[int]:
    """Top-n unacquired lines by summed gradient magnitude."""
    return _top_free_lines(np.asarray(line_scores, dtype=np.float64),
                           acquired, n)


def random_select(acquired: SamplingMask, n: int,
                  rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement among unacquired lines."""
    free = acquired.free_indices()
    if free.size < n:
        raise BudgetExhaustedError(
            f"requested {n} lines but only {free.size} remain"
        )
    return [int(j) for j in rng.choice(free, size=n, replace=False)]


def oracle_reconstruct(ground_truth: np.ndarray,
                       tokenizer: Tokenizer) -> np.ndarray:
    """Encode-quantize-decode the fully sampled ground truth.

    Independent of any mask or policy; the discrete pipeline cannot do
    better than this on average.
    """
    tokens = tokenize_image(tokenizer, ground_truth)
    return reconstruct(tokenizer, tokens.q_re, tokens.q_im,
                       tokens.stats_re, tokens.stats_im)


def _reconstruct_from_distributions(tokenizer, dist_re, dist_im,
                                    stats_re, stats_im, grid):
    q_re = predicted_tokens(dist_re, tokenizer.codebook, *grid)
    q_im = predicted_tokens(dist_im, tokenizer.codebook, *grid)
    return reconstruct(tokenizer, q_re, q_im, stats_re, stats_im)


def run_acquisition(
    ground_truth: np.ndarray,
    cfg: AcquisitionConfig,
    model: LatentTransformer,
    tokenizer: Tokenizer,
) -> AcquisitionTrajectory:
    """Run one full active-acquisition episode on one image.

    The initial mask is the center block.  Measurement noise is drawn once
    per trajectory, so re-measuring a line across steps returns the same
    physical values.  Per-step records include the score vector, the mask
    snapshot after the update, and the reconstruction quality the policy
    saw when it made its choice.
    """
    img = np.asarray(ground_truth, dtype=np.complex128)
    H, W = img.shape
    num_lines = H
    ref_mag = np.abs(img)

    traj = AcquisitionTrajectory(policy=cfg.policy)
    if cfg.policy == "oracle":
        recon = oracle_reconstruct(img, tokenizer)
        traj.final_mask = make_center_mask(num_lines, cfg.rho_c)
        traj.reconstruction = recon
        traj.final_nmse = nmse(ref_mag, np.abs(recon))
        return traj

    budget = sampling_budget(num_lines, cfg.R, cfg.rho_c)
    mask = make_center_mask(num_lines, cfg.rho_c)
    remaining = min(budget, int(mask.num_lines - mask.nnz))
    traj.budget = remaining

    per_step = cfg.lines_per_step
    if per_step is None and cfg.T > 0:
        per_step = max(1, math.ceil(remaining / cfg.T))
    if cfg.T > 0 and per_step * cfg.T < remaining:
        raise ConfigError(
            f"{cfg.T} steps of {per_step} lines cannot reach budget {remaining}"
        )

    rng = np.random.default_rng(cfg.seed)
    noise = NoiseSpec(cfg.noise.sigma,
                      seed=int(np.uint64(cfg.noise.seed) ^ np.uint64(cfg.seed)))
    noise_field = noise.draw(img.shape)

    for t in range(1, cfg.T + 1):
        if remaining <= 0:
            break
        n_t = min(per_step, remaining)
        t0 = time.perf_counter()
        ksp = acquire(img, mask, noise_field=noise_field)

        if cfg.policy == "geo":
            state = pipeline_forward(ksp, tokenizer, model)
            dist_re, dist_im = state.dist_re, state.dist_im
            stats_re, stats_im = state.stats_re, state.stats_im
            grad = backward_to_kspace(state)
            scores = line_gradient_scores(grad.magnitude)
            lines = geo_select(scores, mask, n_t)
        else:
            zf = tokenize_image(tokenizer, zero_fill(ksp))
            dist_re, dist_im = model.predict(zf.q_re, zf.q_im)
            stats_re, stats_im = zf.stats_re, zf.stats_im
            if cfg.policy == "les":
                emap = entropy_map(dist_re, dist_im, zf.q_re.grid_h,
                                   zf.q_re.grid_w, H, W)
                scores = emap.U_kspace.mean(axis=1)
                lines = les_select(emap.U_kspace, mask, n_t)
            else:
                scores = None
                lines = random_select(mask, n_t, rng)
        elapsed_ms = (time.perf_counter() - t0) * 1e3

        recon_t = _reconstruct_from_distributions(
            tokenizer, dist_re, dist_im, stats_re, stats_im,
            (H // tokenizer.p, W // tokenizer.p),
        )
        mask = mask.with_lines(lines)
        remaining -= len(lines)
        traj.steps.append(StepRecord(
            step=t,
            lines=lines,
            mask=mask,
            scores=scores,
            nmse_before=nmse(ref_mag, np.abs(recon_t)),
            time_ms=elapsed_ms,
        ))

    ksp = acquire(img, mask, noise_field=noise_field)
    zf = tokenize_image(tokenizer, zero_fill(ksp))
    dist_re, dist_im = model.predict(zf.q_re, zf.q_im)
    recon = _reconstruct_from_distributions(
        tokenizer, dist_re, dist_im, zf.stats_re, zf.stats_im,
        (zf.q_re.grid_h, zf.q_re.grid_w),
    )
    traj.final_mask = mask
    traj.reconstruction = recon
    traj.final_nmse = nmse(ref_mag, np.abs(recon))
    return traj
