"""Entropy objective and its gradient with respect to the measured k-space.

This is the scoring core of the gradient-driven selection policy: record the
composed forward pass

    k-space -> zero-fill -> split re/im -> normalize -> encode ->
    STE-quantize -> fuse -> transformer -> total token entropy

on a tape, then sweep it backwards.  The quantizer contributes an identity
Jacobian (straight-through); the inverse-FFT node's adjoint is the forward
FFT under the unitary centered convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import InvalidInputError
from .model import LatentTransformer, TokenDistribution, build_forward
from .storage import save_ctns
from .tokenizer import CHANNEL_NORM_EPS, ChannelStats, Tokenizer, channel_stats


def entropy_nats(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats with the 0*log(0) = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def stream_entropy(dist: TokenDistribution) -> np.ndarray:
    """Per-position entropy of one stream, from logits when available."""
    if dist.logits is not None:
        _, (_, _, h) = ad.entropy_sum_from_logits(dist.logits)
        return h
    return entropy_nats(dist.probs)


def total_entropy_loss(dist_re: TokenDistribution,
                       dist_im: TokenDistribution) -> float:
    """Summed per-position entropy of both streams (nats)."""
    return float(stream_entropy(dist_re).sum() + stream_entropy(dist_im).sum())


@dataclass(frozen=True)
class KSpaceGradient:
    """d(total entropy)/d(k-space) and its magnitude map.

    `grad` packs the independent partials w.r.t. the real and imaginary
    parts of each entry as g_re + 1j*g_im; `magnitude` is the element-wise
    complex modulus.  Entries at unsampled positions are reported too; line
    selection is responsible for excluding already-acquired lines.
    """

    grad: np.ndarray       # (H, W) complex128
    magnitude: np.ndarray  # (H, W) float64

    def save_magnitude(self, path) -> None:
        """Debug dump of the magnitude map as a CTNS file."""
        save_ctns(path, self.magnitude.astype(np.complex128))


@dataclass
class PipelineState:
    """One recorded forward pass, ready for a reverse sweep."""

    tape: Tape
    y_id: int
    lat_re_id: int
    lat_im_id: int
    q_re_id: int
    q_im_id: int
    loss_id: int
    idx_re: np.ndarray | None
    idx_im: np.ndarray | None
    dist_re: TokenDistribution
    dist_im: TokenDistribution
    stats_re: ChannelStats
    stats_im: ChannelStats
    grid: tuple[int, int]
    loss: float

    def frozen_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Snap offsets (snapped - latent) at this state's forward values."""
        off_re = self.tape.val(self.q_re_id) - self.tape.val(self.lat_re_id)
        off_im = self.tape.val(self.q_im_id) - self.tape.val(self.lat_im_id)
        return off_re, off_im


def pipeline_forward(
    ksp: np.ndarray,
    tokenizer: Tokenizer,
    model: LatentTransformer,
    frozen_offsets: tuple[np.ndarray, np.ndarray] | None = None,
) -> PipelineState:
    """Record the full measurement-to-entropy forward pass.

    With `frozen_offsets` the quantizer is replaced by the differentiable
    surrogate latent + offset (offsets taken from a reference pass), which
    is the function the straight-through gradient differentiates; the
    finite-difference oracle perturbs exactly this path.
    """
    ksp = np.asarray(ksp, dtype=np.complex128)
    p = tokenizer.p
    gh, gw = ksp.shape[0] // p, ksp.shape[1] // p

    tape = Tape()
    y_id = tape.source(ksp, "y")
    x_id = ad.t_ifft2c(tape, y_id)
    ch_ids = (ad.t_real(tape, x_id), ad.t_imag(tape, x_id))

    enc_wt = tape.source(tokenizer.enc_w.T, "enc_w_t")
    enc_b = tape.source(tokenizer.enc_b, "enc_b")

    lat_ids = []
    q_ids = []
    idx = []
    for k, ch_id in enumerate(ch_ids):
        z_id = ad.t_channel_norm(tape, ch_id, eps=CHANNEL_NORM_EPS)
        patches_id = ad.t_patchify(tape, z_id, p)
        lat_id = ad.t_affine(tape, patches_id, enc_wt, enc_b, name="encode")
        lat_ids.append(lat_id)
        if frozen_offsets is None:
            indices, q_id = ad.t_ste_quantize(tape, lat_id, tokenizer.codebook)
            idx.append(indices)
        else:
            q_id = ad.t_frozen_shift(tape, lat_id, frozen_offsets[k])
            idx.append(None)
        q_ids.append(q_id)

    pids = model.source_params(tape)
    lre, lim = build_forward(tape, pids, model.cfg, q_ids[0], q_ids[1])
    h_re = ad.t_entropy_sum(tape, lre, name="entropy_re")
    h_im = ad.t_entropy_sum(tape, lim, name="entropy_im")
    loss_id = ad.t_add(tape, h_re, h_im, name="total_entropy")

    logits_re = tape.val(lre)
    logits_im = tape.val(lim)
    return PipelineState(
        tape=tape,
        y_id=y_id,
        lat_re_id=lat_ids[0],
        lat_im_id=lat_ids[1],
        q_re_id=q_ids[0],
        q_im_id=q_ids[1],
        loss_id=loss_id,
        idx_re=idx[0],
        idx_im=idx[1],
        dist_re=TokenDistribution("re", ad.softmax(logits_re), logits_re),
        dist_im=TokenDistribution("im", ad.softmax(logits_im), logits_im),
        stats_re=channel_stats(tape.val(ch_ids[0])),
        stats_im=channel_stats(tape.val(ch_ids[1])),
        grid=(gh, gw),
        loss=float(tape.val(loss_id)),
    )


def backward_to_kspace(state: PipelineState,
                       check_replay: bool = False) -> KSpaceGradient:
    """Reverse sweep to the measured k-space.

    `check_replay` re-executes the recorded nodes first and raises
    TapeConsistencyError when any node fails to reproduce its cached output.
    """
    if check_replay:
        state.tape.replay_check()
    grads = state.tape.backward(state.loss_id, seed=np.float64(1.0))
    g_y = np.asarray(grads[state.y_id], dtype=np.complex128)
    return KSpaceGradient(grad=g_y, magnitude=np.abs(g_y))


def line_gradient_scores(magnitude: np.ndarray) -> np.ndarray:
    """Per-line sums of the gradient magnitude map (lines are rows)."""
    G = np.asarray(magnitude, dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise InvalidInputError("gradient magnitude map contains NaN or Inf")
    if np.any(G < 0):
        raise InvalidInputError("gradient magnitude map must be non-negative")
    return G.sum(axis=1)
