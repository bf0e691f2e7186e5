"""Codebook storage, nearest-codeword lookup, straight-through
quantization, the two quantizer loss terms, and token extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import MelSpectrogram
from .tensor import (
    DimensionError,
    Tensor,
    gather_rows,
    no_grad,
    stop_gradient,
    straight_through,
    swap_channel_time,
)


@dataclass
class Codebook:
    """K learnable codewords of fixed dimension."""

    codewords: Tensor  # K x dim

    @property
    def size(self) -> int:
        return self.codewords.data.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.data.shape[1]


@dataclass
class TokenSequence:
    utterance_id: str
    indices: np.ndarray  # int64, one per frame

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class LatentSequence:
    """Continuous latents, their quantized counterpart, and the chosen indices."""

    z_e: Tensor        # B x dim x T
    z_q: Tensor        # B x dim x T, forward value equals the selected codewords
    codes: Tensor      # B x dim x T, differentiable toward the codebook
    indices: np.ndarray  # B x T


def init_codebook(K: int, dim: int, strategy: str = "uniform",
                  seed: int = 0, latents: np.ndarray | None = None) -> Codebook:
    """Seeded codebook init: `uniform` in (-1/K, 1/K), or k-means on a
    provided batch of latent vectors (`kmeans`)."""
    if K < 2:
        raise ValueError(f"codebook needs at least 2 codewords, got K={K}")
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        words = rng.uniform(-1.0 / K, 1.0 / K, size=(K, dim))
    elif strategy == "kmeans":
        if latents is None:
            raise ValueError("kmeans init requires a latent batch")
        words = _kmeans(np.asarray(latents, dtype=np.float64), K, rng)
        if words.shape[1] != dim:
            raise DimensionError(
                f"latent dimension {words.shape[1]} does not match codebook dim {dim}"
            )
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return Codebook(codewords=Tensor(words, requires_grad=True, name="codebook"))


def _kmeans(points: np.ndarray, K: int, rng: np.random.Generator,
            iters: int = 50) -> np.ndarray:
    picks = rng.choice(len(points), size=K, replace=len(points) < K)
    centers = points[picks].copy()
    for _ in range(iters):
        d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d.argmin(axis=1)
        for k in range(K):
            members = points[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
            else:
                centers[k] = points[rng.integers(len(points))]
    return centers


def nearest_codeword(vector: np.ndarray, cb: Codebook) -> tuple[int, float]:
    """Exhaustive nearest codeword by squared distance; ties -> lowest index."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (cb.dim,):
        raise DimensionError(f"vector shape {v.shape} does not match codebook dim ({cb.dim},)")
    d2 = ((cb.codewords.data - v[None, :]) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    return idx, float(d2[idx])


def _nearest_indices(flat: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Batched argmin over squared distances (expanded form; constant in
    the per-row minimizer, so it matches the exhaustive scan)."""
    d = (flat ** 2).sum(axis=1, keepdims=True) \
        + (words ** 2).sum(axis=1)[None, :] \
        - 2.0 * flat @ words.T
    return d.argmin(axis=1)


def quantize_straight_through(z_e: Tensor, cb: Codebook) -> LatentSequence:
    """Snap each frame's latent to its nearest codeword.

    The forward value of z_q is the selected codewords verbatim; the
    backward pass hands the gradient to z_e unchanged and leaves the
    codebook untouched along this path.
    """
    if z_e.data.ndim != 3 or z_e.data.shape[1] != cb.dim:
        raise DimensionError(
            f"latents must be B x {cb.dim} x T, got {z_e.data.shape}"
        )
    B, D, T = z_e.data.shape
    flat = z_e.data.transpose(0, 2, 1).reshape(B * T, D)
    indices = _nearest_indices(flat, cb.codewords.data).reshape(B, T)
    picked = gather_rows(cb.codewords, indices)  # B x T x D, on tape toward codebook
    codes = swap_channel_time(picked)
    z_q = straight_through(z_e, codes)
    return LatentSequence(z_e=z_e, z_q=z_q, codes=codes, indices=indices)


def vq_loss_terms(z_e: Tensor, codes: Tensor) -> tuple[Tensor, Tensor]:
    """Mean-squared codebook and commitment terms.

    codebook term ``mean((sg[z_e] - e)^2)`` moves only the codewords;
    commitment term ``mean((z_e - sg[e])^2)`` moves only the encoder.
    """
    if z_e.data.shape != codes.data.shape:
        raise DimensionError(
            f"latents {z_e.data.shape} and codes {codes.data.shape} differ in shape"
        )
    diff_cb = stop_gradient(z_e) - codes
    codebook_loss = (diff_cb * diff_cb).mean()
    diff_enc = z_e - stop_gradient(codes)
    commitment_loss = (diff_enc * diff_enc).mean()
    return codebook_loss, commitment_loss


def extract_tokens(mel: MelSpectrogram, encoder, cb: Codebook) -> TokenSequence:
    """One codeword index per mel frame; encoder and quantizer only."""
    if mel.num_frames == 0:
        return TokenSequence(utterance_id=mel.utterance_id, indices=np.zeros(0, dtype=np.int64))
    with no_grad():
        x = Tensor(mel.frames.T[None, :, :])  # 1 x mel_bins x T
        z_e = encoder(x)
    flat = z_e.data.transpose(0, 2, 1).reshape(-1, cb.dim)
    indices = _nearest_indices(flat, cb.codewords.data)
    return TokenSequence(utterance_id=mel.utterance_id, indices=indices)


def codebook_usage_stats(sequences: list[TokenSequence] | list[np.ndarray],
                         K: int) -> tuple[np.ndarray, float]:
    """Usage histogram over all tokens and the perplexity of the
    empirical distribution (1 = collapse, K = uniform)."""
    counts = np.zeros(K, dtype=np.int64)
    for seq in sequences:
        idx = seq.indices if isinstance(seq, TokenSequence) else np.asarray(seq)
        if np.any(idx >= K) or np.any(idx < 0):
            raise ValueError(f"token index out of range for K={K}")
        counts += np.bincount(idx, minlength=K)
    total = counts.sum()
    if total == 0:
        raise ValueError("no tokens supplied")
    p = counts / total
    nz = p[p > 0]
    entropy = -(nz * np.log(nz)).sum()
    return counts, float(np.exp(entropy))


def format_token_line(seq: TokenSequence) -> str:
    return f"{seq.utterance_id} " + " ".join(str(int(i)) for i in seq.indices)


def parse_token_line(line: str) -> TokenSequence:
    parts = line.split()
    if not parts:
        raise ValueError("empty token line")
    return TokenSequence(utterance_id=parts[0],
                         indices=np.array([int(x) for x in parts[1:]], dtype=np.int64))
