"""Latent transformer: fuses the two token streams and predicts, for every
latent position, a categorical distribution over codebook indices for the
real and the imaginary stream.

The trunk is a small pre-norm transformer with full bidirectional
self-attention (the task is token in-painting from a corrupted full
sequence, not autoregression) and learned positional embeddings.  Two
linear heads, one per stream, share the trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import (
    ConfigError,
    NotTrainedError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .fourier import (
    NoiseSpec,
    SamplingMask,
    acquire,
    make_center_mask,
    round_half_away,
    zero_fill,
)
from .storage import atomic_write_bytes, read_json, write_json
from .tokenizer import (
    ChannelStats,
    Codebook,
    LatentGrid,
    Tokenizer,
    channel_stats,
    denormalize_channel,
    normalize_channel,
)

FUSE_EPS = 1e-5


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 128

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class TokenDistribution:
    """Per-position categorical distribution over the codebook, one stream."""

    stream: str  # "re" or "im"
    probs: np.ndarray  # (L, K)
    logits: np.ndarray | None = None  # (L, K), for numerically stable losses

    @property
    def L(self) -> int:
        return self.probs.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]


def fuse_streams(q_re: LatentGrid, q_im: LatentGrid,
                 gamma: np.ndarray | None = None,
                 beta: np.ndarray | None = None) -> np.ndarray:
    """Row-wise layer norm of the element-wise stream sum.

    The affine part defaults to identity; the trained model supplies its
    learned gamma/beta.
    """
    if (q_re.L, q_re.D) != (q_im.L, q_im.D):
        raise ShapeMismatchError(
            f"stream shapes differ: {(q_re.L, q_re.D)} vs {(q_im.L, q_im.D)}"
        )
    if gamma is None:
        gamma = np.ones(q_re.D)
    if beta is None:
        beta = np.zeros(q_re.D)
    fused, _ = ad.layer_norm_forward(
        q_re.vectors + q_im.vectors, gamma, beta, FUSE_EPS
    )
    return fused


def predicted_tokens(dist: TokenDistribution, cb: Codebook,
                     grid_h: int | None = None,
                     grid_w: int | None = None) -> LatentGrid:
    """Argmax index per position (lowest index wins ties) -> codebook rows.

    The grid shape defaults to square; pass grid_h/grid_w for non-square
    latent grids.
    """
    if dist.K != cb.K:
        raise ShapeMismatchError(f"distribution K={dist.K} != codebook K={cb.K}")
    indices = np.argmax(dist.probs, axis=1)
    if grid_h is None or grid_w is None:
        side = int(round(dist.L ** 0.5))
        if side * side != dist.L:
            raise ShapeMismatchError(
                f"cannot infer a square grid from L={dist.L}; pass grid_h/grid_w"
            )
        grid_h = grid_w = side
    return LatentGrid(cb.entries[indices], grid_h, grid_w)


def cross_entropy(dist: TokenDistribution | np.ndarray, targets) -> float:
    """Mean over positions of -log p(target), from logits.

    Falls back to log(probs) for distributions built without logits.
    """
    if isinstance(dist, TokenDistribution):
        logits = dist.logits if dist.logits is not None else np.log(dist.probs)
    else:
        logits = dist
    loss, _ = ad.cross_entropy_from_logits(np.asarray(logits), targets)
    return loss


def reconstruct(
    tokenizer: Tokenizer,
    q_re: LatentGrid,
    q_im: LatentGrid,
    stats_re: ChannelStats,
    stats_im: ChannelStats,
) -> np.ndarray:
    """Decode both streams and recombine into a complex image.

    Undoes the per-image channel normalization that was applied before
    encoding.
    """
    re = denormalize_channel(tokenizer.decode(q_re), stats_re)
    im = denormalize_channel(tokenizer.decode(q_im), stats_im)
    return re + 1j * im


@dataclass(frozen=True)
class TokenizedImage:
    """Both channels of one complex image pushed through the tokenizer."""

    lat_re: LatentGrid
    lat_im: LatentGrid
    q_re: LatentGrid
    q_im: LatentGrid
    idx_re: np.ndarray
    idx_im: np.ndarray
    stats_re: ChannelStats
    stats_im: ChannelStats


def tokenize_image(tokenizer: Tokenizer, img: np.ndarray) -> TokenizedImage:
    """Normalize, encode and quantize the re/im channels of an image."""
    img = np.asarray(img, dtype=np.complex128)
    stats_re = channel_stats(img.real)
    stats_im = channel_stats(img.imag)
    lat_re = tokenizer.encode(normalize_channel(img.real, stats_re))
    lat_im = tokenizer.encode(normalize_channel(img.imag, stats_im))
    idx_re, q_re = tokenizer.quantize(lat_re)
    idx_im, q_im = tokenizer.quantize(lat_im)
    return TokenizedImage(lat_re, lat_im, q_re, q_im, idx_re, idx_im,
                          stats_re, stats_im)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: TransformerConfig, latent_dim: int, seq_len: int,
                codebook_size: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameter set.

    Output heads start at zero so the initial distributions are exactly
    uniform; layer norms start at identity.
    """
    rng = np.random.default_rng(seed)
    E, F = cfg.embed_dim, cfg.ffn_dim

    def w(*shape):
        return rng.normal(scale=0.02, size=shape)

    params: dict[str, np.ndarray] = {
        "fuse.gamma": np.ones(latent_dim),
        "fuse.beta": np.zeros(latent_dim),
        "input.w": w(latent_dim, E),
        "input.b": np.zeros(E),
        "pos": w(seq_len, E),
        "final.gamma": np.ones(E),
        "final.beta": np.zeros(E),
        "head_re.w": np.zeros((E, codebook_size)),
        "head_re.b": np.zeros(codebook_size),
        "head_im.w": np.zeros((E, codebook_size)),
        "head_im.b": np.zeros(codebook_size),
    }
    for i in range(cfg.layers):
        pre = f"layer{i}."
        params[pre + "ln1.gamma"] = np.ones(E)
        params[pre + "ln1.beta"] = np.zeros(E)
        params[pre + "attn.wq"] = w(E, E)
        params[pre + "attn.bq"] = np.zeros(E)
        params[pre + "attn.wk"] = w(E, E)
        params[pre + "attn.bk"] = np.zeros(E)
        params[pre + "attn.wv"] = w(E, E)
        params[pre + "attn.bv"] = np.zeros(E)
        params[pre + "attn.wo"] = w(E, E)
        params[pre + "attn.bo"] = np.zeros(E)
        params[pre + "ln2.gamma"] = np.ones(E)
        params[pre + "ln2.beta"] = np.zeros(E)
        params[pre + "ffn.w1"] = w(E, F)
        params[pre + "ffn.b1"] = np.zeros(F)
        params[pre + "ffn.w2"] = w(F, E)
        params[pre + "ffn.b2"] = np.zeros(E)
    return params


def build_forward(tape: Tape, pids: dict[str, int], cfg: TransformerConfig,
                  q_re_id: int, q_im_id: int) -> tuple[int, int]:
    """Record the full trunk on `tape`; returns (logits_re_id, logits_im_id).

    `pids` maps parameter names to tape source ids, so the same builder
    serves parameter gradients (training) and input gradients (line
    scoring).
    """
    summed = ad.t_add(tape, q_re_id, q_im_id, name="stream_sum")
    fused = ad.t_layer_norm(tape, summed, pids["fuse.gamma"],
                            pids["fuse.beta"], eps=FUSE_EPS, name="fuse")
    x = ad.t_affine(tape, fused, pids["input.w"], pids["input.b"],
                    name="input_proj")
    x = ad.t_add(tape, x, pids["pos"], name="pos_add")
    for i in range(cfg.layers):
        pre = f"layer{i}."
        y = ad.t_layer_norm(tape, x, pids[pre + "ln1.gamma"],
                            pids[pre + "ln1.beta"], name=pre + "ln1")
        a = ad.t_attention(
            tape, y,
            pids[pre + "attn.wq"], pids[pre + "attn.bq"],
            pids[pre + "attn.wk"], pids[pre + "attn.bk"],
            pids[pre + "attn.wv"], pids[pre + "attn.bv"],
            pids[pre + "attn.wo"], pids[pre + "attn.bo"],
            heads=cfg.heads, name=pre + "attn",
        )
        x = ad.t_add(tape, x, a, name=pre + "res1")
        z = ad.t_layer_norm(tape, x, pids[pre + "ln2.gamma"],
                            pids[pre + "ln2.beta"], name=pre + "ln2")
        f = ad.t_ffn(tape, z, pids[pre + "ffn.w1"], pids[pre + "ffn.b1"],
                     pids[pre + "ffn.w2"], pids[pre + "ffn.b2"],
                     name=pre + "ffn")
        x = ad.t_add(tape, x, f, name=pre + "res2")
    xf = ad.t_layer_norm(tape, x, pids["final.gamma"], pids["final.beta"],
                         name="final_ln")
    logits_re = ad.t_affine(tape, xf, pids["head_re.w"], pids["head_re.b"],
                            name="head_re")
    logits_im = ad.t_affine(tape, xf, pids["head_im.w"], pids["head_im.b"],
                            name="head_im")
    return logits_re, logits_im


class LatentTransformer:
    """Trained (or freshly initialized) transformer with its geometry."""

    def __init__(self, cfg: TransformerConfig, params: dict[str, np.ndarray],
                 latent_dim: int, seq_len: int, codebook_size: int):
        self.cfg = cfg
        self.params = params
        self.latent_dim = latent_dim
        self.seq_len = seq_len
        self.codebook_size = codebook_size

    @classmethod
    def init(cls, cfg: TransformerConfig, latent_dim: int, seq_len: int,
             codebook_size: int, seed: int = 0) -> "LatentTransformer":
        params = init_params(cfg, latent_dim, seq_len, codebook_size, seed)
        return cls(cfg, params, latent_dim, seq_len, codebook_size)

    def source_params(self, tape: Tape) -> dict[str, int]:
        return {name: tape.source(val, name) for name, val in self.params.items()}

    def _check_geometry(self, q_re: LatentGrid, q_im: LatentGrid):
        if (q_re.L, q_re.D) != (q_im.L, q_im.D):
            raise ShapeMismatchError("stream geometries differ")
        if q_re.L != self.seq_len or q_re.D != self.latent_dim:
            raise ShapeMismatchError(
                f"model expects L={self.seq_len}, D={self.latent_dim}; "
                f"got L={q_re.L}, D={q_re.D}"
            )

    def predict(self, q_re: LatentGrid, q_im: LatentGrid
                ) -> tuple[TokenDistribution, TokenDistribution]:
        """Inference pass; deterministic given weights and inputs."""
        self._check_geometry(q_re, q_im)
        tape = Tape()
        pids = self.source_params(tape)
        rid = tape.source(q_re.vectors, "q_re")
        iid = tape.source(q_im.vectors, "q_im")
        lre, lim = build_forward(tape, pids, self.cfg, rid, iid)
        logits_re = tape.val(lre)
        logits_im = tape.val(lim)
        return (
            TokenDistribution("re", ad.softmax(logits_re), logits_re),
            TokenDistribution("im", ad.softmax(logits_im), logits_im),
        )

    # -- persistence --------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": {
                "layers": self.cfg.layers,
                "heads": self.cfg.heads,
                "embed_dim": self.cfg.embed_dim,
                "ffn_dim": self.cfg.ffn_dim,
            },
            "latent_dim": self.latent_dim,
            "seq_len": self.seq_len,
            "codebook_size": self.codebook_size,
            "tensors": {},
        }
        for name in sorted(self.params):
            fname = name.replace("/", "_") + ".bin"
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            atomic_write_bytes(directory / fname, arr.tobytes())
            manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
        write_json(directory / "manifest.json", manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "LatentTransformer":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise NotTrainedError(f"missing model manifest: {manifest_path}")
        manifest = read_json(manifest_path)
        cfg = TransformerConfig(**manifest["config"])
        params = {}
        for name, meta in manifest["tensors"].items():
            raw = (directory / meta["file"]).read_bytes()
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(
                meta["shape"]
            ).astype(np.float64)
        return cls(cfg, params, manifest["latent_dim"], manifest["seq_len"],
                   manifest["codebook_size"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RandomMaskSampler:
    """Cartesian masks with the center block plus a random non-center set.

    The acceleration is drawn log-uniformly from [accel_lo, accel_hi] for
    each sample: the range covers every corruption level a trajectory
    visits (center-only up to near-full), while keeping enough lightly
    corrupted examples for the model to learn input conditioning rather
    than collapsing to the marginal token distribution.
    """

    rho_c: float = 0.04
    accel_lo: float = 1.2
    accel_hi: float = 24.0

    def __call__(self, rng: np.random.Generator, num_lines: int) -> SamplingMask:
        R = float(np.exp(rng.uniform(np.log(self.accel_lo),
                                     np.log(self.accel_hi))))
        budget = round_half_away(num_lines * (1.0 - self.rho_c) / R)
        mask = make_center_mask(num_lines, self.rho_c)
        free = mask.free_indices()
        take = min(budget, free.size)
        if take > 0:
            chosen = rng.choice(free, size=take, replace=False)
            mask = mask.with_lines(chosen)
        return mask


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class TrainState:
    """Everything needed to continue training deterministically."""

    model: LatentTransformer
    adam: AdamState
    epoch: int
    trace: list = field(default_factory=list)  # (epoch, step, mean token CE)
    rng_state: dict | None = None


def _adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999,
               eps=1e-8):
    state.t += 1
    t = state.t
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        mhat = state.m[name] / (1 - beta1**t)
        vhat = state.v[name] / (1 - beta2**t)
        params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + eps)


def batch_loss_and_grads(model: LatentTransformer, q_re: np.ndarray,
                         q_im: np.ndarray, idx_re: np.ndarray,
                         idx_im: np.ndarray
                         ) -> tuple[float, dict[str, np.ndarray]]:
    """Summed stream cross-entropies and parameter gradients.

    Inputs may be a single example (L, D)/(L,) or a stacked batch
    (B, L, D)/(B, L); the loss is the per-token mean either way.
    """
    tape = Tape()
    pids = model.source_params(tape)
    rid = tape.source(q_re, "q_re")
    iid = tape.source(q_im, "q_im")
    lre, lim = build_forward(tape, pids, model.cfg, rid, iid)
    ce_re = ad.t_cross_entropy(tape, lre, idx_re, name="ce_re")
    ce_im = ad.t_cross_entropy(tape, lim, idx_im, name="ce_im")
    loss_id = ad.t_add(tape, ce_re, ce_im, name="loss")
    loss = float(tape.val(loss_id))
    grads = tape.backward(loss_id, seed=np.float64(1.0))
    pgrads = {
        name: grads.get(pid, np.zeros_like(model.params[name]))
        for name, pid in pids.items()
    }
    return loss, pgrads


def example_loss_and_grads(model: LatentTransformer, q_re: LatentGrid,
                           q_im: LatentGrid, idx_re: np.ndarray,
                           idx_im: np.ndarray
                           ) -> tuple[float, dict[str, np.ndarray]]:
    """Single-example convenience wrapper around :func:`batch_loss_and_grads`."""
    return batch_loss_and_grads(model, q_re.vectors, q_im.vectors,
                                idx_re, idx_im)


def _tokenize_stack(tokenizer: Tokenizer, imgs: list[np.ndarray]
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Snapped (B, L, D) latents for both channels of a stack of images.

    Vectorized equivalent of per-image :func:`tokenize_image` for the
    training hot path (stats, encode and quantize in single array ops).
    """
    from .tokenizer import CHANNEL_NORM_EPS, nearest_entry_indices

    arr = np.stack(imgs)  # (B, H, W) complex
    B, H, W = arr.shape
    p = tokenizer.p
    gh, gw = H // p, W // p
    chans = np.concatenate([arr.real, arr.imag])  # (2B, H, W): re block, im block
    mu = chans.mean(axis=(1, 2), keepdims=True)
    std = np.sqrt(chans.var(axis=(1, 2), keepdims=True) + CHANNEL_NORM_EPS)
    z = (chans - mu) / std
    patches = (
        z.reshape(2 * B, gh, p, gw, p)
        .transpose(0, 1, 3, 2, 4)
        .reshape(2 * B, gh * gw, p * p)
    )
    lat = patches @ tokenizer.enc_w.T + tokenizer.enc_b
    entries = tokenizer.codebook.entries
    idx = nearest_entry_indices(lat.reshape(-1, lat.shape[-1]), entries)
    snapped = entries[idx].reshape(2 * B, gh * gw, -1)
    return snapped[:B], snapped[B:]


def train_model(
    dataset,
    tokenizer: Tokenizer,
    cfg: TransformerConfig,
    mask_sampler=None,
    epochs: int = 30,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    noise: NoiseSpec = NoiseSpec(),
    resume: TrainState | None = None,
    on_epoch_end=None,
) -> TrainState:
    """Offline training against randomly undersampled acquisitions.

    Every example in every epoch draws a fresh random mask, acquires,
    zero-fills, tokenizes both channels, and minimizes the summed token
    cross-entropy of both streams against the fully sampled image's token
    indices.  The tokenizer stays frozen.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    if mask_sampler is None:
        mask_sampler = RandomMaskSampler()
    images = [np.asarray(img, dtype=np.complex128) for img in dataset]
    num_lines = images[0].shape[0]

    # fully-sampled token targets are fixed; compute once
    targets = [tokenize_image(tokenizer, img) for img in images]
    seq_len = targets[0].q_re.L

    if resume is not None:
        model = resume.model
        adam = resume.adam
        trace = list(resume.trace)
        start_epoch = resume.epoch
        rng = np.random.default_rng(seed)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
    else:
        model = LatentTransformer.init(
            cfg, tokenizer.D, seq_len, tokenizer.codebook.K, seed=seed
        )
        adam = AdamState(
            m={k: np.zeros_like(v) for k, v in model.params.items()},
            v={k: np.zeros_like(v) for k, v in model.params.items()},
        )
        trace = []
        start_epoch = 0
        rng = np.random.default_rng(seed)

    state = TrainState(model=model, adam=adam, epoch=start_epoch, trace=trace)
    for epoch in range(start_epoch, epochs):
        order = rng.permutation(len(images))
        step = 0
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            zf_imgs, idx_re, idx_im = [], [], []
            for idx in batch:
                img = images[int(idx)]
                mask = mask_sampler(rng, num_lines)
                zf_imgs.append(zero_fill(acquire(img, mask, noise=noise)))
                tgt = targets[int(idx)]
                idx_re.append(tgt.idx_re)
                idx_im.append(tgt.idx_im)
            q_re, q_im = _tokenize_stack(tokenizer, zf_imgs)
            loss, pgrads = batch_loss_and_grads(
                model, q_re, q_im, np.stack(idx_re), np.stack(idx_im),
            )
            mean_token_ce = loss / 2.0
            if not np.isfinite(mean_token_ce):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, step {step}",
                    checkpoint=state,
                )
            _adam_step(model.params, pgrads, adam, lr)
            trace.append((epoch, step, mean_token_ce))
            step += 1
        state.epoch = epoch + 1
        state.trace = trace
        state.rng_state = rng.bit_generator.state
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state
