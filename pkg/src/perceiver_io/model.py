"""Encode / process / decode architecture.

``inputs [M, C]`` are read into a learned latent array ``[N, D]`` by one
cross-attention block, refined by ``L = num_blocks * layers_per_block``
latent self-attention blocks, and written to ``[O, E]`` outputs by a
cross-attention block queried with an ``[O, E_q]`` query array. A leading
batch axis is accepted everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionModule, ConfigError, SelfAttention
from .layers import Linear, Module, truncated_normal
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class PerceiverConfig:
    input_channels: int
    num_latents: int
    latent_channels: int
    decoder_query_channels: int
    output_channels: int
    num_blocks: int = 1
    layers_per_block: int = 1
    share_weights_across_blocks: bool = False
    encoder: AttentionConfig = field(default_factory=AttentionConfig)
    processor: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: AttentionConfig = field(default_factory=AttentionConfig)
    final_projection: bool = True
    decoder_kind: str = "attention"  # or "average_project"
    latent_init_std: float = 0.02

    @property
    def depth(self) -> int:
        return self.num_blocks * self.layers_per_block

    def validate(self) -> None:
        for name in ("input_channels", "num_latents", "latent_channels", "decoder_query_channels", "output_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_blocks < 0 or self.layers_per_block < 0:
            raise ConfigError("num_blocks and layers_per_block must be >= 0")
        if self.decoder_kind not in ("attention", "average_project"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if not self.final_projection and self.decoder_kind == "attention":
            out = self.decoder.output_channels
            if out is not None and out != self.output_channels:
                raise ConfigError(
                    "without a final projection the decoder must emit output_channels "
                    f"({self.output_channels}), got {out}"
                )


class AverageProjectDecoder(Module):
    """Uniform average over latents followed by one linear projection."""

    def __init__(self, name: str, latent_channels: int, output_channels: int, rng: np.random.Generator):
        self.proj = Linear(f"{name}.proj", latent_channels, output_channels, rng)

    def __call__(self, latents: Tensor) -> Tensor:
        return self.proj(ops.mean_axis(latents, -2))


class PerceiverIO(Module):
    def __init__(self, config: PerceiverConfig, rng: np.random.Generator):
        config.validate()
        self.config = c = config
        self.latents = Parameter(
            "latents", truncated_normal(rng, (c.num_latents, c.latent_channels), c.latent_init_std)
        )
        self.encoder = AttentionModule("encoder", c.encoder, c.latent_channels, c.input_channels, rng)
        if self.encoder.dims.output_channels != c.latent_channels:
            raise ConfigError("encoder must emit latent_channels")

        unique_blocks = 1 if c.share_weights_across_blocks else c.num_blocks
        self.blocks: list[list[SelfAttention]] = []
        for b in range(unique_blocks):
            self.blocks.append(
                [
                    SelfAttention(f"processor.block{b}.layer{k}", c.processor, c.latent_channels, rng)
                    for k in range(c.layers_per_block)
                ]
            )
        if c.share_weights_across_blocks and c.num_blocks > 1:
            self.blocks = self.blocks * c.num_blocks

        self.decoder = None
        self.average_decoder = None
        self.output_proj = None
        if c.decoder_kind == "attention":
            dec_cfg = c.decoder
            if not c.final_projection and dec_cfg.output_channels is None:
                dec_cfg = replace(dec_cfg, output_channels=c.output_channels)
            self.decoder = AttentionModule("decoder", dec_cfg, c.decoder_query_channels, c.latent_channels, rng)
            if c.final_projection:
                self.output_proj = Linear(
                    "output_proj", self.decoder.dims.output_channels, c.output_channels, rng
                )
        else:
            self.average_decoder = AverageProjectDecoder("decoder", c.latent_channels, c.output_channels, rng)

    def processor_layers(self) -> list[SelfAttention]:
        return [layer for block in self.blocks for layer in block]

    def initial_latents(self, batch: int | None) -> Tensor:
        return self.latents if batch is None else ops.repeat_batch(self.latents, batch)

    def encode(self, inputs: Tensor, input_mask=None, rng: np.random.Generator | None = None) -> Tensor:
        """Cross-attend from the latent array to ``inputs [.., M, C]``."""
        if inputs.shape[-1] != self.config.input_channels:
            raise ValueError(
                f"inputs have {inputs.shape[-1]} channels, config expects {self.config.input_channels}"
            )
        if input_mask is not None and not np.asarray(input_mask, dtype=bool).any(axis=-1).all():
            raise ValueError("every input element is masked")
        batch = inputs.shape[0] if inputs.ndim == 3 else None
        return self.encoder(self.initial_latents(batch), inputs, input_mask, rng)

    def process(self, latents: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.processor_layers():
            latents = layer(latents, rng=rng)
        return latents

    def decode(self, latents: Tensor, queries: Tensor | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Cross-attend from ``queries [.., O, E_q]`` to the latents, then project to E."""
        if self.average_decoder is not None:
            return self.average_decoder(latents)
        if queries is None:
            raise ValueError("the attention decoder needs a query array")
        if queries.shape[-1] != self.config.decoder_query_channels:
            raise ValueError(
                f"queries have {queries.shape[-1]} channels, config expects "
                f"{self.config.decoder_query_channels}"
            )
        if latents.ndim == 3 and queries.ndim == 2:
            queries = ops.repeat_batch(queries, latents.shape[0])
        out = self.decoder(queries, latents, rng=rng)
        if self.output_proj is not None:
            out = self.output_proj(out)
        return out

    def __call__(
        self,
        inputs: Tensor,
        queries: Tensor | None = None,
        input_mask=None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        return self.decode(self.process(self.encode(inputs, input_mask, rng), rng), queries, rng)

    forward = __call__
