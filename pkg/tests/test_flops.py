import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perceiver_io import checkpoint
from perceiver_io.attention import AttentionConfig, ConfigError
from perceiver_io.flops import (
    AttentionDims,
    PerceiverArch,
    TransformerArch,
    arch_from_dict,
    attention_block_cost,
    count,
    from_model_config,
    params,
    preset_report,
    scaling_curve,
    transformer_layer_cost,
)
from perceiver_io.model import PerceiverConfig, PerceiverIO


def unit_arch(**kw):
    base = dict(
        input_size=1, input_channels=1, num_latents=1, latent_channels=1, num_layers=0,
        output_size=1, query_channels=1, output_channels=1,
    )
    base.update(kw)
    return PerceiverArch(**base)


def test_unit_architecture_hand_count():
    # Each attention block has 8 unit matmuls (Q, K, V, QK, AV, out, two MLP) at 2 FLOPs each.
    r = count(unit_arch())
    assert {s.name: (s.flops, s.params) for s in r.stages} == {
        "embeddings": (0, 1),
        "encode": (16, 17),
        "process": (0, 0),
        "decode": (16, 17),
        "projections": (2, 2),
    }
    assert (r.total_flops, r.total_params) == (34, 37)


def test_bert_base_within_fifteen_percent():
    r = preset_report("bert-base")
    assert abs(r.total_flops - 109e9) / 109e9 <= 0.15
    assert abs(r.total_params - 110e6) / 110e6 <= 0.15
    assert r.total_flops == 122_406_567_936
    assert r.total_params == 110_650_880


def test_preset_reports_carry_published_figures():
    r = preset_report("perceiver-io-language")
    assert r.reference["flops"]["published"] == 113e9
    assert r.reference["flops"]["ours"] == r.total_flops
    with pytest.raises(KeyError):
        preset_report("gpt")


def test_self_attention_layer_matches_transformer_layer():
    for n, d, ff in [(1, 1, 1), (7, 12, 48), (512, 768, 3072)]:
        f, p = attention_block_cost(n, n, d, d, AttentionDims(out=d, mlp_hidden=ff), self_attention=True)
        tf, tp = transformer_layer_cost(n, d, ff)
        assert f == tf
        # The transformer layer carries a key bias the model omits.
        assert tp - p == d


def test_transformer_matches_closed_form():
    t = TransformerArch(num_layers=2, width=4, ff_width=8, num_heads=2, vocab_size=10, seq_len=3)
    r = count(t)
    assert r.stage("process").flops == 2 * (8 * 3 * 16 + 4 * 9 * 4 + 4 * 3 * 4 * 8)
    assert r.stage("projections").flops == 2 * 3 * 4 * 10 + 2 * 3 * 4 * 4


@pytest.mark.parametrize(
    "kw",
    [
        {},
        {"num_blocks": 2, "layers_per_block": 2, "share_weights_across_blocks": True},
        {"final_projection": False},
        {"decoder_kind": "average_project"},
        {"processor": AttentionConfig(num_heads=2, qk_channels=4, mlp_hidden_ratio=2.0)},
    ],
)
def test_parameter_count_matches_checkpoint_manifest(tmp_path, kw):
    cfg = dict(
        input_channels=5, num_latents=3, latent_channels=8, decoder_query_channels=6, output_channels=2,
        layers_per_block=2, encoder=AttentionConfig(num_heads=2), processor=AttentionConfig(num_heads=2),
        decoder=AttentionConfig(num_heads=2, use_query_residual=False),
    )
    cfg.update(kw)
    config = PerceiverConfig(**cfg)
    model = PerceiverIO(config, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {p.name: p.data for p in model.parameters()})
    manifest = checkpoint.read_manifest(path)
    assert sum(math.prod(e["shape"]) for e in manifest) == params(from_model_config(config, 10, 4))


def test_flops_match_model_matmul_shapes():
    # Independent recount from the resolved widths of a concrete model.
    config = PerceiverConfig(
        input_channels=5, num_latents=3, latent_channels=8, decoder_query_channels=6, output_channels=2,
        layers_per_block=2, encoder=AttentionConfig(num_heads=2), processor=AttentionConfig(num_heads=2),
        decoder=AttentionConfig(num_heads=2, use_query_residual=False),
    )
    M, O = 10, 4
    model = PerceiverIO(config, np.random.default_rng(0))
    N = 3
    total = 0
    for p in model.parameters():
        if p.ndim != 2 or p.name == "latents":
            continue
        if p.name.startswith(("encoder.attn.k", "encoder.attn.v")):
            rows = M
        elif p.name.startswith(("decoder.attn.k", "decoder.attn.v")):
            rows = N
        elif p.name.startswith(("decoder", "output")):
            rows = O
        else:
            rows = N
        total += 2 * rows * p.shape[0] * p.shape[1]
    # QK^T and weights @ V for the encoder, two processor layers and the decoder.
    attn = 2 * (2 * N * M * 8) + 2 * 2 * (2 * N * N * 8) + 2 * (2 * O * N * 6)
    assert count(from_model_config(config, M, O)).total_flops == total + attn


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 4096), st.integers(0, 12))
def test_totals_equal_stage_sums_and_are_affine(m, o, layers):
    arch = unit_arch(
        input_size=m, input_channels=7, num_latents=5, latent_channels=12, num_layers=layers,
        output_size=o, query_channels=9, output_channels=3,
    )
    r = count(arch)
    assert r.total_flops == sum(s.flops for s in r.stages)
    assert r.stage("process").flops == layers * r.per_process_layer_flops
    for vary in ("M", "O", "L"):
        assert scaling_curve(arch, vary, [1, 2, 5, 17]).affine


def test_doubling_input_and_output_sizes():
    arch = unit_arch(
        input_size=1000, input_channels=16, num_latents=8, latent_channels=32, num_layers=4,
        output_size=500, query_channels=16, output_channels=4,
    )
    base = count(arch)
    big = count(PerceiverArch(**{**arch.__dict__, "input_size": 2000}))
    assert big.stage("process").flops == base.stage("process").flops
    assert big.stage("decode").flops == base.stage("decode").flops
    # Encoder cost is affine in M with the latent query projection as intercept.
    intercept = 2 * 8 * 32 * 32 + 2 * 8 * 32 * 32 + 2 * 8 * 32 * 32 * 2
    assert big.stage("encode").flops - intercept == 2 * (base.stage("encode").flops - intercept)
    big_out = count(PerceiverArch(**{**arch.__dict__, "output_size": 1000}))
    assert big_out.stage("decode").flops == 2 * base.stage("decode").flops - 2 * 2 * 8 * 32 * 16
    assert big_out.stage("projections").flops == 2 * base.stage("projections").flops
    assert scaling_curve(arch, "M", [1000, 2000, 4000]).affine


def test_scaling_curve_errors():
    with pytest.raises(ValueError):
        scaling_curve(unit_arch(), "N", [1, 2])
    with pytest.raises(ValueError):
        scaling_curve(unit_arch(), "M", [3])


def test_position_and_query_tables_are_counted():
    base = params(unit_arch(input_channels=4, output_size=3, query_channels=5))
    with_tables = params(unit_arch(input_channels=4, output_size=3, query_channels=5,
                                   input_vocab=260, input_positions=2048, learned_queries=True))
    assert with_tables - base == 260 * 4 + 2048 * 4 + 3 * 5


def test_arch_from_dict():
    spec = arch_from_dict({**unit_arch().__dict__, "encoder": {"qk": 2}})
    assert spec.encoder == AttentionDims(qk=2)
    t = arch_from_dict({"kind": "transformer", "num_layers": 1, "width": 4, "ff_width": 4, "num_heads": 2,
                        "vocab_size": 5, "seq_len": 2})
    assert isinstance(t, TransformerArch)
    with pytest.raises(ConfigError, match="encoder.bogus"):
        arch_from_dict({**unit_arch().__dict__, "encoder": {"bogus": 1}})
    with pytest.raises(ConfigError):
        arch_from_dict({**unit_arch().__dict__, "num_latents": 0})


def test_report_serialisation():
    r = count(unit_arch())
    d = r.to_dict()
    assert d["total_flops"] == 34 and d["total_params"] == 37
    assert "total" in r.table()
