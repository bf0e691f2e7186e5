"""Adversarial training loop for the quantized autoencoder.

The generator (encoder, decoder, codebook, speaker table) minimizes
reconstruction + the two quantizer terms minus the critic score of its
output; the critic minimizes the negated Wasserstein gap plus a
gradient penalty. The penalty's squared input-gradient norm is
estimated with directional central differences through extra critic
evaluations, which keeps the whole loop first-order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .audio import MelSpectrogram
from .checkpoint import CheckpointError, read_container, write_container
from .networks import Decoder, Discriminator, Encoder, SpeakerTable, scaled_specs
from .optim import AdamState, adam_step
from .tensor import DimensionError, Tensor
from .vq import Codebook, init_codebook, quantize_straight_through, vq_loss_terms


@dataclass(frozen=True)
class TrainConfig:
    codebook_size: int = 256
    channel_scale: float = 1.0      # shrink factor on internal widths; 1.0 = full size
    latent_dim: int | None = None   # default derived from channel_scale
    lambda_gp: float = 10.0
    n_critic: int = 5
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    recon_loss_kind: str = "l1"
    w_codebook: float = 1.0
    w_commit: float = 1.0
    batch_size: int = 8
    crop_frames: int = 64
    max_steps: int = 2000
    seed: int = 0
    fd_epsilon: float = 1e-3
    fd_directions: int = 4
    codebook_init: str = "uniform"  # or "kmeans" (fit on the first batch of latents)
    checkpoint_every: int = 0       # 0 = final checkpoint only

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.fd_directions < 1:
            raise ValueError(f"fd_directions must be >= 1, got {self.fd_directions}")
        if min(self.w_codebook, self.w_commit, self.lambda_gp) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.recon_loss_kind not in ("l1", "l2"):
            raise ValueError(f"recon_loss_kind must be l1 or l2, got {self.recon_loss_kind!r}")
        if self.codebook_init not in ("uniform", "kmeans"):
            raise ValueError(f"codebook_init must be uniform or kmeans, got {self.codebook_init!r}")
        if self.batch_size < 1 or self.crop_frames < 1:
            raise ValueError("batch_size and crop_frames must be positive")


@dataclass
class Models:
    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    codebook: Codebook
    speakers: SpeakerTable

    def generator_parameters(self) -> list[Tensor]:
        return (self.encoder.parameters() + self.decoder.parameters()
                + [self.codebook.codewords] + self.speakers.parameters())

    def discriminator_parameters(self) -> list[Tensor]:
        return self.discriminator.parameters()

    def all_parameters(self) -> list[Tensor]:
        return self.generator_parameters() + self.discriminator_parameters()


def build_models(cfg: TrainConfig, speaker_ids: list[str]) -> Models:
    enc_spec, dec_spec, disc_spec = scaled_specs(cfg.channel_scale, cfg.latent_dim)
    latent = enc_spec.latent_channels
    return Models(
        encoder=Encoder(enc_spec, seed=cfg.seed + 1),
        decoder=Decoder(dec_spec, seed=cfg.seed + 2),
        discriminator=Discriminator(disc_spec, seed=cfg.seed + 3),
        codebook=init_codebook(cfg.codebook_size, latent, seed=cfg.seed + 4),
        speakers=SpeakerTable(speaker_ids, dim=latent, seed=cfg.seed + 5),
    )


# -- losses -------------------------------------------------------------------


def reconstruction_loss(x: Tensor, x_hat: Tensor, kind: str = "l1") -> Tensor:
    if x.data.shape != x_hat.data.shape:
        raise DimensionError(
            f"reconstruction shapes differ: {x.data.shape} vs {x_hat.data.shape}"
        )
    diff = x_hat - x
    if kind == "l1":
        return diff.abs().mean()
    if kind == "l2":
        return (diff * diff).mean()
    raise ValueError(f"unknown reconstruction kind {kind!r}")


def gradient_penalty(d_fn, x_real: np.ndarray, x_fake: np.ndarray,
                     cfg: TrainConfig, rng: np.random.Generator
                     ) -> tuple[Tensor, np.ndarray]:
    """One-sided penalty (||grad D at interpolants|| - 1)^2, estimated without
    second-order autodiff.

    For each of r random per-sample unit directions u, the directional
    derivative of the critic is taken by central differences; with d the
    per-sample element count, (d/r) * sum_i <grad, u_i>^2 is an unbiased
    estimate of the squared gradient norm. The 2r critic evaluations stay
    on the tape, so the penalty trains the critic's parameters only.

    Returns the scalar penalty and the per-sample norm-squared estimates.
    """
    if x_real.shape != x_fake.shape:
        raise DimensionError(
            f"real and fake batches differ in shape: {x_real.shape} vs {x_fake.shape}"
        )
    B = x_real.shape[0]
    d = int(np.prod(x_real.shape[1:]))
    eps = rng.uniform(0.0, 1.0, size=(B,) + (1,) * (x_real.ndim - 1))
    x_mid = eps * x_real + (1.0 - eps) * x_fake
    delta = cfg.fd_epsilon
    r = cfg.fd_directions
    sq_sum = None
    for _ in range(r):
        u = rng.standard_normal(x_mid.shape)
        norms = np.sqrt((u.reshape(B, -1) ** 2).sum(axis=1))
        u /= norms.reshape((B,) + (1,) * (x_real.ndim - 1))
        up = d_fn(Tensor(x_mid + delta * u))
        dn = d_fn(Tensor(x_mid - delta * u))
        diff = (up - dn) * (1.0 / (2.0 * delta))
        term = diff * diff
        sq_sum = term if sq_sum is None else sq_sum + term
    ghat_sq = sq_sum * (d / r)
    ghat = tt.sqrt(ghat_sq)
    pen = (ghat - 1.0) * (ghat - 1.0)
    return pen.mean(), ghat_sq.data.copy()


# -- batches ------------------------------------------------------------------


@dataclass
class Batch:
    mels: np.ndarray          # B x mel_bins x crop
    speaker_ids: list[str]


class Corpus:
    """In-memory list of (features, speaker) with seeded crop sampling."""

    def __init__(self, items: list[tuple[MelSpectrogram, str]]):
        if not items:
            raise ValueError("corpus is empty")
        self.items = items
        self.speaker_ids = sorted({spk for _, spk in items})

    def __len__(self) -> int:
        return len(self.items)

    def sample_batch(self, batch_size: int, crop: int, rng: np.random.Generator) -> Batch:
        picks = rng.integers(0, len(self.items), size=batch_size)
        mels = []
        speakers = []
        for i in picks:
            mel, spk = self.items[int(i)]
            T = mel.num_frames
            if T < crop:
                raise ValueError(
                    f"utterance {mel.utterance_id!r} has {T} frames, below crop {crop}"
                )
            off = int(rng.integers(0, T - crop + 1))
            mels.append(mel.frames[off:off + crop].T)  # mel_bins x crop
            speakers.append(spk)
        return Batch(mels=np.stack(mels), speaker_ids=speakers)


# -- steps --------------------------------------------------------------------


def discriminator_loss(disc, x_real: np.ndarray, x_fake: np.ndarray,
                       cfg: TrainConfig, rng: np.random.Generator
                       ) -> tuple[Tensor, dict]:
    """-E[D(real)] + E[D(fake)] plus the weighted gradient penalty."""
    score_real = disc(Tensor(x_real)).mean()
    score_fake = disc(Tensor(x_fake)).mean()
    loss = score_fake - score_real
    gp_value = 0.0
    if cfg.lambda_gp > 0:
        penalty, _ = gradient_penalty(disc, x_real, x_fake, cfg, rng)
        loss = loss + cfg.lambda_gp * penalty
        gp_value = float(penalty.data)
    stats = {
        "wasserstein_gap": float(score_real.data - score_fake.data),
        "gradient_penalty": gp_value,
    }
    return loss, stats


def discriminator_step(batch: Batch, models: Models, cfg: TrainConfig,
                       opt_d: AdamState, rng: np.random.Generator) -> dict:
    """One critic update; the generator is run detached."""
    if batch.mels.shape[0] == 0:
        raise ValueError("empty batch")
    with tt.no_grad():
        z_e = models.encoder(Tensor(batch.mels))
        lat = quantize_straight_through(z_e, models.codebook)
        spk = models.speakers.embed_batch(batch.speaker_ids)
        x_fake = models.decoder(lat.z_q, spk).data

    loss, stats = discriminator_loss(models.discriminator, batch.mels, x_fake, cfg, rng)
    d_params = models.discriminator_parameters()
    tt.zero_grads(d_params)
    loss.backward()
    adam_step(d_params, [p.grad for p in d_params], opt_d)
    return {"loss_d": float(loss.data), **stats}


def generator_step(batch: Batch, models: Models, cfg: TrainConfig,
                   opt_g: AdamState) -> dict:
    """One generator update; the critic's parameters are frozen."""
    x = Tensor(batch.mels)
    z_e = models.encoder(x)
    lat = quantize_straight_through(z_e, models.codebook)
    spk = models.speakers.embed_batch(batch.speaker_ids)
    x_hat = models.decoder(lat.z_q, spk)

    recon = reconstruction_loss(x, x_hat, cfg.recon_loss_kind)
    cb_loss, commit = vq_loss_terms(lat.z_e, lat.codes)
    with tt.frozen(models.discriminator_parameters()):
        adv = models.discriminator(x_hat).mean()
    loss = recon + cfg.w_codebook * cb_loss + cfg.w_commit * commit - adv

    g_params = models.generator_parameters()
    tt.zero_grads(g_params)
    loss.backward()
    adam_step(g_params, [p.grad for p in g_params], opt_g)

    counts = np.bincount(lat.indices.ravel(), minlength=cfg.codebook_size)
    p = counts[counts > 0] / counts.sum()
    perplexity = float(np.exp(-(p * np.log(p)).sum()))
    return {
        "loss_g": float(loss.data),
        "recon": float(recon.data),
        "codebook_loss": float(cb_loss.data),
        "commitment_loss": float(commit.data),
        "adv": float(adv.data),
        "perplexity": perplexity,
    }


# -- loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    models: Models
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


def train(corpus: Corpus, cfg: TrainConfig, out_dir=None,
          models: Models | None = None, opt_g: AdamState | None = None,
          opt_d: AdamState | None = None, rng: np.random.Generator | None = None,
          start_step: int = 0, log_fn=None) -> TrainResult:
    """Alternating n_critic critic updates then one generator update.

    Fully deterministic given the config seed: batch order, crop
    offsets, interpolation draws, and penalty directions all come from
    one seeded generator (or the generator restored from a checkpoint
    when resuming).
    """
    if models is None:
        models = build_models(cfg, corpus.speaker_ids)
        if cfg.codebook_init == "kmeans":
            _kmeans_init_codebook(models, corpus, cfg)
    if models.speakers.ids != corpus.speaker_ids:
        raise ValueError(
            f"speaker table {models.speakers.ids} does not match corpus speakers "
            f"{corpus.speaker_ids}"
        )
    if opt_g is None:
        opt_g = AdamState.for_params(models.generator_parameters(), lr=cfg.lr_g,
                                     beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    if opt_d is None:
        opt_d = AdamState.for_params(models.discriminator_parameters(), lr=cfg.lr_d,
                                     beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")

    result = TrainResult(models=models)
    try:
        for step in range(start_step + 1, cfg.max_steps + 1):
            d_stats = {}
            for _ in range(cfg.n_critic):
                batch = corpus.sample_batch(cfg.batch_size, cfg.crop_frames, rng)
                d_stats = discriminator_step(batch, models, cfg, opt_d, rng)
            batch = corpus.sample_batch(cfg.batch_size, cfg.crop_frames, rng)
            g_stats = generator_step(batch, models, cfg, opt_g)
            record = {"step": step, **g_stats, **d_stats}
            for key, value in record.items():
                if key != "step" and not np.isfinite(value):
                    raise FloatingPointError(f"non-finite {key} at step {step}: {value}")
            result.metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if log_fn is not None:
                log_fn(record)
            if (out_dir is not None and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0 and step < cfg.max_steps):
                save_checkpoint(out_dir / f"step{step:06d}.vqck", models, opt_g,
                                opt_d, cfg, step, rng)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        result.checkpoint_path = out_dir / "final.vqck"
        save_checkpoint(result.checkpoint_path, models, opt_g, opt_d, cfg,
                        cfg.max_steps, rng)
    return result


# -- checkpoints --------------------------------------------------------------


def _model_arrays(models: Models) -> list[tuple[str, np.ndarray]]:
    return [(p.name, p.data) for p in models.all_parameters()]


def save_checkpoint(path, models: Models, opt_g: AdamState, opt_d: AdamState,
                    cfg: TrainConfig, step: int,
                    rng: np.random.Generator | None = None) -> None:
    arrays = _model_arrays(models)
    for tag, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays.append((f"{tag}.m.{i}", m))
            arrays.append((f"{tag}.v.{i}", v))
    header = {
        "config": dataclasses.asdict(cfg),
        "speaker_ids": models.speakers.ids,
        "step": int(step),
        "opt_g_steps": opt_g.step_count,
        "opt_d_steps": opt_d.step_count,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    write_container(path, header, arrays)


def load_checkpoint(path, expected_cfg: TrainConfig | None = None):
    """Restore models, optimizer states, config, step, and RNG.

    With `expected_cfg`, any differing field refuses the load with a
    field-by-field diff.
    """
    header, arrays = read_container(path)
    cfg = TrainConfig(**header["config"])
    if expected_cfg is not None and cfg != expected_cfg:
        diffs = []
        for f in dataclasses.fields(TrainConfig):
            a = getattr(cfg, f.name)
            b = getattr(expected_cfg, f.name)
            if a != b:
                diffs.append(f"{f.name}: checkpoint {a!r} != expected {b!r}")
        raise CheckpointError(f"{path}: config mismatch: " + "; ".join(diffs))
    models = build_models(cfg, header["speaker_ids"])
    for p in models.all_parameters():
        if p.name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {p.name}")
        if arrays[p.name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {p.name} has shape {arrays[p.name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arrays[p.name]
    opt_g = AdamState.for_params(models.generator_parameters(), lr=cfg.lr_g,
                                 beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    opt_d = AdamState.for_params(models.discriminator_parameters(), lr=cfg.lr_d,
                                 beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    for tag, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        for i in range(len(opt.m)):
            opt.m[i] = arrays[f"{tag}.m.{i}"]
            opt.v[i] = arrays[f"{tag}.v.{i}"]
    opt_g.step_count = header["opt_g_steps"]
    opt_d.step_count = header["opt_d_steps"]
    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        state = header["rng_state"]
        # json turns the inner state dict keys into strings already; restore as-is
        rng.bit_generator.state = state
    return models, opt_g, opt_d, cfg, header["step"], rng
