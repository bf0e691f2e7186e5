"""The three residual conv networks (encoder, decoder with skip-sum and
speaker conditioning, discriminator) and the speaker embedding table.

Channel plans default to the full-size architecture; every network is a
stack of 4 res-layers of 3 residual blocks each, followed by a plain
output convolution. A residual block is
conv(k)->norm->activation->conv(k)->norm plus a shortcut (1x1 projection
when the channel count changes); the first block of each res-layer
carries the channel change. All convolutions preserve the time length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 80
    layer_channels: tuple[int, ...] = (256, 128, 128, 128)
    latent_channels: int = 128
    kernel_size: int = 3
    blocks_per_layer: int = 3
    slope: float = 0.2


@dataclass(frozen=True)
class DecoderSpec:
    latent_channels: int = 128
    speaker_dim: int = 128
    layer_channels: tuple[int, ...] = (128, 128, 256, 80)
    out_channels: int = 80
    kernel_size: int = 3
    blocks_per_layer: int = 3


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 80
    layer_channels: tuple[int, ...] = (256, 128, 64, 32)
    kernel_size: int = 3
    blocks_per_layer: int = 3
    slope: float = 0.2


def scaled_specs(scale: float = 1.0, latent_dim: int | None = None
                 ) -> tuple[EncoderSpec, DecoderSpec, DiscriminatorSpec]:
    """Shrink internal widths by `scale`, keeping the 80-dim feature
    interfaces; used for desk-scale training and gradient checks."""
    def s(c):
        return max(4, int(round(c * scale)))

    latent = latent_dim if latent_dim is not None else s(128)
    enc = EncoderSpec(layer_channels=(s(256), s(128), s(128), s(128)), latent_channels=latent)
    dec = DecoderSpec(latent_channels=latent, speaker_dim=latent,
                      layer_channels=(s(128), s(128), s(256), 80))
    disc = DiscriminatorSpec(layer_channels=(s(256), s(128), s(64), s(32)))
    return enc, dec, disc


def _kaiming_uniform(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (c_in * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k))


class Conv1d:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, name: str):
        self.weight = Tensor(_kaiming_uniform(rng, c_out, c_in, k),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return tt.conv1d(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class LayerNormChannels:
    def __init__(self, channels: int, name: str):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [self.gamma, self.beta]


class ResidualBlock:
    """conv -> norm -> activation -> conv -> norm, plus shortcut.

    With GLU activation the first conv doubles its output channels so
    the gate can halve them again.
    """

    def __init__(self, c_in: int, c_out: int, k: int, activation: str,
                 rng: np.random.Generator, name: str, slope: float = 0.2):
        if activation not in ("leaky_relu", "glu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.slope = slope
        mid = 2 * c_out if activation == "glu" else c_out
        self.conv1 = Conv1d(c_in, mid, k, rng, f"{name}.conv1")
        self.norm1 = LayerNormChannels(mid, f"{name}.norm1")
        self.conv2 = Conv1d(c_out, c_out, k, rng, f"{name}.conv2")
        self.norm2 = LayerNormChannels(c_out, f"{name}.norm2")
        self.shortcut = Conv1d(c_in, c_out, 1, rng, f"{name}.shortcut") if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(self.conv1(x))
        if self.activation == "glu":
            h = tt.glu(h)
        else:
            h = tt.leaky_relu(h, self.slope)
        h = self.norm2(self.conv2(h))
        s = self.shortcut(x) if self.shortcut is not None else x
        return h + s

    def parameters(self):
        out = self.conv1.parameters() + self.norm1.parameters() \
            + self.conv2.parameters() + self.norm2.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out


class ResLayer:
    def __init__(self, c_in: int, c_out: int, k: int, blocks: int, activation: str,
                 rng: np.random.Generator, name: str, slope: float = 0.2):
        self.blocks = [
            ResidualBlock(c_in if i == 0 else c_out, c_out, k, activation, rng,
                          f"{name}.block{i}", slope=slope)
            for i in range(blocks)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]


class Encoder:
    def __init__(self, spec: EncoderSpec = EncoderSpec(), seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers = []
        c = spec.in_channels
        for i, width in enumerate(spec.layer_channels):
            self.layers.append(ResLayer(c, width, spec.kernel_size, spec.blocks_per_layer,
                                        "leaky_relu", rng, f"enc.res{i + 1}", spec.slope))
            c = width
        self.out_conv = Conv1d(c, spec.latent_channels, 1, rng, "enc.out_conv")

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[1] != self.spec.in_channels:
            raise tt.DimensionError(
                f"encoder expects B x {self.spec.in_channels} x T, got {x.data.shape}"
            )
        for layer in self.layers:
            x = layer(x)
        return self.out_conv(x)

    def layer_outputs(self, x: Tensor) -> list[Tensor]:
        """Per-res-layer outputs followed by the final conv (shape tests)."""
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        outs.append(self.out_conv(x))
        return outs

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()] + self.out_conv.parameters()


class SpeakerTable:
    """speaker_id -> trainable embedding row."""

    def __init__(self, speaker_ids: list[str], dim: int, seed: int = 0):
        if len(set(speaker_ids)) != len(speaker_ids):
            raise ValueError("duplicate speaker ids")
        self.ids = list(speaker_ids)
        self.index = {s: i for i, s in enumerate(self.ids)}
        rng = np.random.default_rng(seed)
        self.embeddings = Tensor(rng.standard_normal((len(self.ids), dim)) / np.sqrt(dim),
                                 requires_grad=True, name="speakers.embeddings")

    @property
    def dim(self) -> int:
        return self.embeddings.data.shape[1]

    def lookup_indices(self, speaker_ids: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[s] for s in speaker_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(
                f"unknown speaker {exc.args[0]!r}; known speakers: {', '.join(self.ids)}"
            ) from None

    def embed(self, speaker_id: str) -> Tensor:
        idx = self.lookup_indices([speaker_id])
        return tt.gather_rows(self.embeddings, idx[0])

    def embed_batch(self, speaker_ids: list[str]) -> Tensor:
        """B x dim, on tape toward the embedding matrix."""
        idx = self.lookup_indices(speaker_ids)
        return tt.gather_rows(self.embeddings, idx)

    def parameters(self):
        return [self.embeddings]


class Decoder:
    def __init__(self, spec: DecoderSpec = DecoderSpec(), seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.input_proj = Conv1d(spec.latent_channels + spec.speaker_dim,
                                 spec.latent_channels, 1, rng, "dec.input_proj")
        self.layers = []
        self.skip_projs = []
        c = spec.latent_channels
        for i, width in enumerate(spec.layer_channels):
            self.layers.append(ResLayer(c, width, spec.kernel_size, spec.blocks_per_layer,
                                        "glu", rng, f"dec.res{i + 1}"))
            self.skip_projs.append(Conv1d(width, spec.out_channels, 1, rng, f"dec.skip{i + 1}"))
            c = width
        self.post_conv = Conv1d(spec.out_channels, 2 * spec.out_channels,
                                spec.kernel_size, rng, "dec.post_conv")
        self.post_norm = LayerNormChannels(2 * spec.out_channels, "dec.post_norm")
        self.out_conv = Conv1d(spec.out_channels, spec.out_channels, 1, rng, "dec.out_conv")

    def __call__(self, z_q: Tensor, speaker: Tensor) -> Tensor:
        """z_q: B x latent x T; speaker: B x speaker_dim (one row per batch item)."""
        if z_q.data.ndim != 3 or z_q.data.shape[1] != self.spec.latent_channels:
            raise tt.DimensionError(
                f"decoder expects B x {self.spec.latent_channels} x T, got {z_q.data.shape}"
            )
        B, _, T = z_q.data.shape
        if speaker.data.shape != (B, self.spec.speaker_dim):
            raise tt.DimensionError(
                f"speaker batch must be {B} x {self.spec.speaker_dim}, got {speaker.data.shape}"
            )
        spk = tt.tile_time(speaker, T)  # B x dim x T
        x = self.input_proj(tt.concat_channels(z_q, spk))
        skips = None
        for layer, proj in zip(self.layers, self.skip_projs):
            x = layer(x)
            s = proj(x)
            skips = s if skips is None else skips + s
        h = tt.glu(self.post_norm(self.post_conv(skips)))
        return self.out_conv(h)

    def layer_outputs(self, z_q: Tensor, speaker: Tensor) -> dict:
        """Intermediate shapes for conformance tests."""
        B, _, T = z_q.data.shape
        spk = tt.tile_time(speaker, T)
        x = self.input_proj(tt.concat_channels(z_q, spk))
        outs = {"input": x}
        skips = None
        for i, (layer, proj) in enumerate(zip(self.layers, self.skip_projs)):
            x = layer(x)
            outs[f"res{i + 1}"] = x
            s = proj(x)
            outs[f"skip{i + 1}"] = s
            skips = s if skips is None else skips + s
        outs["skip_sum"] = skips
        h = tt.glu(self.post_norm(self.post_conv(skips)))
        outs["post_conv"] = h
        outs["out_conv"] = self.out_conv(h)
        return outs

    def parameters(self):
        out = self.input_proj.parameters()
        for l, s in zip(self.layers, self.skip_projs):
            out += l.parameters() + s.parameters()
        out += self.post_conv.parameters() + self.post_norm.parameters() \
            + self.out_conv.parameters()
        return out


class Discriminator:
    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers = []
        c = spec.in_channels
        for i, width in enumerate(spec.layer_channels):
            self.layers.append(ResLayer(c, width, spec.kernel_size, spec.blocks_per_layer,
                                        "leaky_relu", rng, f"disc.res{i + 1}", spec.slope))
            c = width
        self.out_conv = Conv1d(c, 1, 1, rng, "disc.out_conv")

    def frame_scores(self, x: Tensor) -> Tensor:
        """Per-frame critic scores, B x 1 x T."""
        if x.data.ndim != 3 or x.data.shape[1] != self.spec.in_channels:
            raise tt.DimensionError(
                f"discriminator expects B x {self.spec.in_channels} x T, got {x.data.shape}"
            )
        for layer in self.layers:
            x = layer(x)
        return self.out_conv(x)

    def __call__(self, x: Tensor) -> Tensor:
        """Time-mean reduction to one scalar per batch element, shape (B,)."""
        return self.frame_scores(x).mean(axes=(1, 2))

    def layer_outputs(self, x: Tensor) -> list[Tensor]:
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        outs.append(self.out_conv(x))
        return outs

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()] + self.out_conv.parameters()


def parameter_manifest(net) -> list[tuple[str, tuple[int, ...]]]:
    """Stable (name, shape) listing of a network's parameters."""
    return [(p.name, tuple(p.data.shape)) for p in net.parameters()]
