"""Theoretical FLOPs and parameter counts.

Convention: only matrix products are counted, and an ``(a x b) @ (b x c)``
product costs ``2abc`` (multiplies and adds counted separately). Softmax,
layer norm, activations, residual adds and embedding lookups cost nothing.
All arithmetic is on Python integers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Sequence

from pydantic import TypeAdapter

from .attention import ConfigError

CONVENTION = (
    "matmul FLOPs only: (a x b)(b x c) = 2abc; softmax, norms, activations "
    "and embedding lookups excluded"
)


@dataclass(frozen=True)
class AttentionDims:
    """Widths of one attention block; ``None`` widths default as in the model."""

    qk: int | None = None
    v: int | None = None
    out: int | None = None
    mlp_hidden: int | None = None


@dataclass(frozen=True)
class PerceiverArch:
    """Everything the counter needs about a Perceiver IO model and its I/O.

    ``input_vocab`` and ``input_positions`` add an embedding table and a
    learned position table of width ``input_channels``; ``learned_queries``
    adds an ``[output_size, query_channels]`` query table; ``output_vocab``
    is the width of the final projection (defaults to ``output_channels``).
    """

    input_size: int
    input_channels: int
    num_latents: int
    latent_channels: int
    num_layers: int
    output_size: int
    query_channels: int
    output_channels: int
    encoder: AttentionDims = field(default_factory=AttentionDims)
    process: AttentionDims = field(default_factory=AttentionDims)
    decoder: AttentionDims = field(default_factory=AttentionDims)
    final_projection: bool = True
    decoder_kind: str = "attention"
    unique_layers: int | None = None  # processor layers with their own weights
    input_vocab: int = 0
    input_positions: int = 0
    learned_queries: bool = False
    kind: str = "perceiver-io"

    def validate(self) -> None:
        for k in ("input_size", "input_channels", "num_latents", "latent_channels",
                  "output_size", "query_channels", "output_channels"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")


@dataclass(frozen=True)
class TransformerArch:
    """Encoder-only transformer (BERT style) with tied-free vocabulary head.

    ``mlm_head`` adds the dense transform before the vocabulary projection.
    """

    num_layers: int
    width: int
    ff_width: int
    num_heads: int
    vocab_size: int
    seq_len: int
    type_vocab: int = 2
    mlm_head: bool = True
    tied_output: bool = True
    kind: str = "transformer"

    def validate(self) -> None:
        for k in ("num_layers", "width", "ff_width", "num_heads", "seq_len"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.width % self.num_heads:
            raise ConfigError("width must be divisible by num_heads")


ArchitectureSpec = PerceiverArch | TransformerArch


@dataclass(frozen=True)
class Stage:
    name: str
    flops: int
    params: int


@dataclass(frozen=True)
class FlopsReport:
    kind: str
    stages: tuple[Stage, ...]
    per_process_layer_flops: int
    per_process_layer_params: int
    convention: str = CONVENTION
    reference: dict = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.stages)

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "convention": self.convention,
            "stages": [asdict(s) for s in self.stages],
            "per_process_layer": {"flops": self.per_process_layer_flops, "params": self.per_process_layer_params},
            "total_flops": self.total_flops,
            "total_params": self.total_params,
        }
        if self.reference:
            out["reference"] = self.reference
        return out

    def table(self) -> str:
        lines = [f"# {self.kind}: {self.convention}", f"{'stage':<14}{'FLOPs':>20}{'params':>16}"]
        for s in self.stages:
            lines.append(f"{s.name:<14}{s.flops:>20,}{s.params:>16,}")
        lines.append(f"{'total':<14}{self.total_flops:>20,}{self.total_params:>16,}")
        lines.append(f"{'':<14}{self.total_flops:>20.3e}{self.total_params / 1e6:>15.2f}M")
        for k, v in self.reference.items():
            lines.append(f"reference {k}: {v}")
        return "\n".join(lines)


def attention_block_cost(
    n: int, m: int, q_in: int, kv_in: int, dims: AttentionDims, self_attention: bool = False
) -> tuple[int, int]:
    """``(flops, params)`` of one attention block with ``n`` queries over ``m`` keys.

    Parameters follow the model: query/value/output projections with bias,
    key projection without, one layer norm per distinct input plus one
    before the MLP.
    """
    qk = dims.qk or q_in
    v = dims.v or qk
    out = dims.out or q_in
    hidden = dims.mlp_hidden or out
    flops = (
        2 * n * q_in * qk  # Q
        + 2 * m * kv_in * qk  # K
        + 2 * m * kv_in * v  # V
        + 2 * n * m * qk  # Q K^T
        + 2 * n * m * v  # weights @ V
        + 2 * n * v * out  # output projection
        + 2 * n * out * hidden * 2  # MLP
    )
    norms = 2 * q_in + (0 if self_attention else 2 * kv_in) + 2 * out
    params = (
        q_in * qk + qk
        + kv_in * qk
        + kv_in * v + v
        + v * out + out
        + out * hidden + hidden + hidden * out + out
        + norms
    )
    return flops, params


def _count_perceiver(a: PerceiverArch) -> FlopsReport:
    a.validate()
    M, C, N, D, O = a.input_size, a.input_channels, a.num_latents, a.latent_channels, a.output_size
    emb_params = a.input_vocab * C + a.input_positions * C + N * D
    if a.learned_queries:
        emb_params += O * a.query_channels
    embeddings = Stage("embeddings", 0, emb_params)

    enc = replace(a.encoder, out=D)
    encode = Stage("encode", *attention_block_cost(N, M, D, C, enc))

    layer_flops, layer_params = attention_block_cost(N, N, D, D, replace(a.process, out=D), self_attention=True)
    unique = a.num_layers if a.unique_layers is None else a.unique_layers
    process = Stage("process", a.num_layers * layer_flops, unique * layer_params)

    if a.decoder_kind == "average_project":
        decode = Stage("decode", 0, 0)
        proj = Stage("projections", 2 * D * a.output_channels, D * a.output_channels + a.output_channels)
    else:
        dec = a.decoder
        if not a.final_projection and dec.out is None:
            dec = replace(dec, out=a.output_channels)
        decode = Stage("decode", *attention_block_cost(O, N, a.query_channels, D, dec))
        dec_out = dec.out or a.query_channels
        if a.final_projection:
            proj = Stage(
                "projections",
                2 * O * dec_out * a.output_channels,
                dec_out * a.output_channels + a.output_channels,
            )
        else:
            proj = Stage("projections", 0, 0)
    return FlopsReport(a.kind, (embeddings, encode, process, decode, proj), layer_flops, layer_params)


def transformer_layer_cost(s: int, d: int, ff: int) -> tuple[int, int]:
    """One post-LN encoder layer: ``8sd^2 + 4s^2d + 4sd*ff`` FLOPs."""
    flops = 8 * s * d * d + 4 * s * s * d + 4 * s * d * ff
    params = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 2 * 2 * d
    return flops, params


def _count_transformer(t: TransformerArch) -> FlopsReport:
    t.validate()
    s, d, V = t.seq_len, t.width, t.vocab_size
    emb = Stage("embeddings", 0, V * d + s * d + t.type_vocab * d + 2 * d)
    layer_flops, layer_params = transformer_layer_cost(s, d, t.ff_width)
    process = Stage("process", t.num_layers * layer_flops, t.num_layers * layer_params)
    head_flops = 2 * s * d * V
    head_params = V  # output bias; weights tied to the input embedding
    if not t.tied_output:
        head_params += V * d
    if t.mlm_head:
        head_flops += 2 * s * d * d
        head_params += d * d + d + 2 * d
    proj = Stage("projections", head_flops, head_params)
    zero = (Stage("encode", 0, 0), Stage("decode", 0, 0))
    return FlopsReport(t.kind, (emb, zero[0], process, zero[1], proj), layer_flops, layer_params)


def count(spec: ArchitectureSpec) -> FlopsReport:
    if isinstance(spec, PerceiverArch):
        return _count_perceiver(spec)
    if isinstance(spec, TransformerArch):
        return _count_transformer(spec)
    raise TypeError(f"unsupported architecture spec {spec!r}")


def arch_from_dict(data: dict) -> ArchitectureSpec:
    """Build a spec from JSON-style data; ``kind`` picks the class (default perceiver-io).

    Unknown keys raise ``ConfigError``; type errors raise ``pydantic.ValidationError``.
    """
    cls = TransformerArch if data.get("kind") == "transformer" else PerceiverArch
    known = set(cls.__dataclass_fields__)
    extra = sorted(set(data) - known)
    for key in ("encoder", "process", "decoder"):
        if isinstance(data.get(key), dict):
            extra += [f"{key}.{k}" for k in sorted(set(data[key]) - set(AttentionDims.__dataclass_fields__))]
    if extra:
        raise ConfigError(f"unknown architecture fields: {', '.join(extra)}")
    spec = TypeAdapter(cls).validate_python(data)
    spec.validate()
    return spec


def params(spec: ArchitectureSpec) -> int:
    return count(spec).total_params


def from_model_config(config, input_size: int, output_size: int, **extra) -> PerceiverArch:
    """Architecture spec matching a :class:`PerceiverConfig` instance exactly."""
    from .attention import resolve

    c = config
    enc = resolve(c.encoder, c.latent_channels, c.input_channels)
    proc = resolve(c.processor, c.latent_channels, c.latent_channels)
    dec_cfg = c.decoder
    if not c.final_projection and dec_cfg.output_channels is None:
        dec_cfg = replace(dec_cfg, output_channels=c.output_channels)
    dec = resolve(dec_cfg, c.decoder_query_channels, c.latent_channels)

    def dims(r):
        return AttentionDims(r.qk_channels, r.v_channels, r.output_channels, r.mlp_hidden)

    return PerceiverArch(
        input_size=input_size,
        input_channels=c.input_channels,
        num_latents=c.num_latents,
        latent_channels=c.latent_channels,
        num_layers=c.depth,
        output_size=output_size,
        query_channels=c.decoder_query_channels,
        output_channels=c.output_channels,
        encoder=dims(enc),
        process=dims(proc),
        decoder=dims(dec),
        final_projection=c.final_projection,
        decoder_kind=c.decoder_kind,
        unique_layers=c.layers_per_block if c.share_weights_across_blocks else c.depth,
        **extra,
    )


# -- scaling -----------------------------------------------------------------


@dataclass(frozen=True)
class ScalingCurve:
    vary: str
    values: tuple[int, ...]
    totals: tuple[int, ...]
    stage_flops: dict
    slope: Fraction
    intercept: Fraction
    affine: bool

    def rows(self) -> list[dict]:
        return [
            {"value": v, "total": t, **{k: s[i] for k, s in self.stage_flops.items()}}
            for i, (v, t) in enumerate(zip(self.values, self.totals))
        ]


_VARY_FIELDS = {"M": "input_size", "O": "output_size", "L": "num_layers"}


def scaling_curve(spec: PerceiverArch, vary: str, values: Sequence[int]) -> ScalingCurve:
    """Count FLOPs as one of ``M``, ``O`` or ``L`` varies; fit and test an affine law exactly."""
    if vary not in _VARY_FIELDS:
        raise ValueError(f"vary must be one of {sorted(_VARY_FIELDS)}")
    values = tuple(int(v) for v in values)
    if len(values) < 2 or len(set(values)) != len(values):
        raise ValueError("need at least two distinct values")
    if any(v < (0 if vary == "L" else 1) for v in values):
        raise ValueError("values must be positive")
    reports = [count(replace(spec, **{_VARY_FIELDS[vary]: v})) for v in values]
    totals = tuple(r.total_flops for r in reports)
    stage_flops = {s.name: tuple(r.stage(s.name).flops for r in reports) for s in reports[0].stages}
    v0, v1 = values[0], values[1]
    slope = Fraction(totals[1] - totals[0], v1 - v0)
    intercept = totals[0] - slope * v0
    affine = all(t == slope * v + intercept for v, t in zip(values, totals))
    return ScalingCurve(vary, values, totals, stage_flops, slope, intercept, affine)


# -- presets -------------------------------------------------------------------

BYTE_VOCAB = 260


def _language(latent: int, layers: int) -> PerceiverArch:
    return PerceiverArch(
        input_size=2048,
        input_channels=768,
        num_latents=256,
        latent_channels=latent,
        num_layers=layers,
        output_size=2048,
        query_channels=768,
        output_channels=BYTE_VOCAB,
        encoder=AttentionDims(mlp_hidden=latent),
        process=AttentionDims(mlp_hidden=latent),
        decoder=AttentionDims(mlp_hidden=768),
        input_vocab=BYTE_VOCAB,
        input_positions=2048,
        learned_queries=True,
    )


PRESETS: dict[str, tuple[ArchitectureSpec, dict]] = {
    "bert-base": (
        TransformerArch(num_layers=12, width=768, ff_width=3072, num_heads=12, vocab_size=32000, seq_len=512),
        {"flops": 109e9, "params": 110e6},
    ),
    "perceiver-io-language": (_language(1280, 26), {"flops": 113e9, "params": 201e6}),
    "perceiver-io-plus-plus": (_language(1536, 40), {"flops": 241e9, "params": 425e6}),
    "imagenet-config-A": (
        PerceiverArch(
            input_size=224 * 224,
            input_channels=261,
            num_latents=512,
            latent_channels=1024,
            num_layers=48,
            unique_layers=6,
            output_size=1,
            query_channels=1024,
            output_channels=1000,
            learned_queries=True,
        ),
        {"flops": 407e9, "params": 48.4e6},
    ),
    "starcraft-entity-encoder": (
        PerceiverArch(
            input_size=512,
            input_channels=128,
            num_latents=32,
            latent_channels=128,
            num_layers=3,
            output_size=512,
            query_channels=128,
            output_channels=128,
            encoder=AttentionDims(mlp_hidden=1024),
            process=AttentionDims(mlp_hidden=1024),
            decoder=AttentionDims(mlp_hidden=1024),
        ),
        {"flops": 0.93e9},
    ),
}


def preset_report(name: str) -> FlopsReport:
    """Count a named preset and attach the published figures with relative gaps."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec, ref = PRESETS[name]
    report = count(spec)
    reference = {}
    for key, value in ref.items():
        ours = report.total_flops if key == "flops" else report.total_params
        gap = (ours - value) / value
        reference[key] = {"published": value, "ours": ours, "relative_gap": round(gap, 4)}
    return replace(report, reference=reference)
