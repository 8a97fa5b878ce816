"""Config-driven toy experiments.

One JSON document describes a run. ``run`` trains the selected task with
LAMB, writes ``metrics.csv`` (step, split, metric, value), ``summary.json``,
the resolved ``config.json`` and a final checkpoint. Every random stream is
derived from the config seed, so a config reproduces its metric file
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import checkpoint, ops
from .attention import AttentionConfig, ConfigError
from .encodings import (
    FourierSpec,
    LearnedQueries,
    ModalitySpec,
    ModalityEmbedding,
    PerTaskQueries,
    QueryBuilder,
    build_input_array,
    fourier_position_encoding,
    learned_position_table,
)
from .flops import count, from_model_config, preset_report
from .layers import MLP, Linear, Module, truncated_normal
from .model import PerceiverConfig, PerceiverIO
from .preprocessing import (
    ByteVocab,
    extract_flow_patches,
    group_documents,
    mask_labels,
    mlm_batch,
    patch_audio,
    patch_video,
    serialize_multimodal,
    split_documents,
    synthetic_flow_pair,
)
from .tensor import Parameter, Tensor
from .training import (
    Lamb,
    Schedule,
    accuracy,
    compute_gradients,
    end_point_error,
    psnr,
    range_loss,
    schedule_rate,
)

TASKS = ("toy-mlm", "toy-flow", "toy-multimodal-autoencode", "toy-classify", "multitask-toy", "flops-report")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    num_latents: int = Field(32, ge=1)
    latent_channels: int = Field(64, ge=1)
    num_blocks: int = Field(1, ge=0)
    layers_per_block: int = Field(4, ge=0)
    share_weights: bool = False
    cross_heads: int = Field(1, ge=1)
    self_heads: int = Field(4, ge=1)
    cross_mlp_ratio: float = Field(1.0, gt=0)
    self_mlp_ratio: float = Field(1.0, gt=0)
    embed_channels: int = Field(64, ge=1)  # token embedding / projected input width
    query_channels: int = Field(64, ge=1)
    decoder_query_residual: bool = True
    decoder_kind: Literal["attention", "average_project"] = "attention"
    dropout: float = Field(0.0, ge=0, lt=1)


class QuerySection(_Section):
    kind: Literal["default", "per_task", "shared_token", "task_tokens"] = "default"
    fourier_bands: int = Field(8, ge=1)


class DataSection(_Section):
    batch_size: int = Field(16, ge=1)
    eval_examples: int = Field(64, ge=1)
    # toy-mlm
    seq_len: int = Field(64, ge=2)
    num_sentences: int = Field(4, ge=1)
    words_per_sentence: int = Field(8, ge=1)
    mask_prob: float = Field(0.15, ge=0, le=1)
    # toy-flow
    image_size: int = Field(16, ge=1)
    max_shift: int = Field(3, ge=0)
    patch_size: int = Field(3, ge=1)
    dot_density: float = Field(0.3, gt=0, lt=1)
    image_channels: int = Field(3, ge=1)
    # Training steps spent at each shift range 1, 2, ... before max_shift; 0 disables.
    shift_curriculum_steps: int = Field(0, ge=0)
    # toy-multimodal-autoencode
    frames: int = Field(8, ge=1)
    video_size: int = Field(16, ge=4)
    video_patch: int = Field(4, ge=1)
    audio_samples: int = Field(1024, ge=16)
    audio_patch: int = Field(16, ge=1)
    num_classes: int = Field(4, ge=2)
    label_mask_prob: float = Field(0.5, ge=0, le=1)
    serialized_width: int = Field(128, ge=2)
    video_queries_per_step: int = Field(128, ge=1)
    audio_queries_per_step: int = Field(128, ge=1)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 0.1)
    # toy-classify
    set_size: int = Field(8, ge=1)
    feature_dim: int = Field(4, ge=1)
    cluster_noise: float = Field(0.5, ge=0)
    train_examples: int = Field(256, ge=1)
    # multitask-toy
    string_length: int = Field(7, ge=1)
    tasks: tuple[Literal["parity", "majority"], ...] = ("parity", "majority")


class ScheduleSection(_Section):
    kind: Literal["warmup_cosine", "flat_cosine", "constant"] = "warmup_cosine"
    base_rate: float = Field(2e-3, ge=0)
    warmup_steps: int = Field(100, ge=0)
    flat_steps: int = Field(0, ge=0)
    decay_steps: int | None = Field(None, ge=0)  # default: the remaining steps


class OptimizerSection(_Section):
    weight_decay: float = Field(0.0, ge=0)
    clip_norm: float | None = Field(None, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)


class ExperimentConfig(_Section):
    task: Literal[
        "toy-mlm", "toy-flow", "toy-multimodal-autoencode", "toy-classify", "multitask-toy", "flops-report"
    ]
    seed: int = 0
    steps: int = Field(1000, ge=0)
    eval_every: int = Field(250, ge=1)
    log_every: int = Field(50, ge=1)
    model: ModelSection = ModelSection()
    queries: QuerySection = QuerySection()
    data: DataSection = DataSection()
    schedule: ScheduleSection = ScheduleSection()
    optimizer: OptimizerSection = OptimizerSection()
    preset: str | None = None
    output_dir: str | None = None

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        body = self.resolved()
        body.pop("output_dir", None)
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def schedule_obj(self) -> Schedule:
        s = self.schedule
        used = s.warmup_steps if s.kind == "warmup_cosine" else s.flat_steps if s.kind == "flat_cosine" else 0
        decay = s.decay_steps if s.decay_steps is not None else max(1, self.steps - used)
        sched = Schedule(s.kind, s.base_rate, s.warmup_steps, s.flat_steps, decay)
        sched.validate()
        return sched


def load_config(source: str | Path | dict, **overrides) -> ExperimentConfig:
    """Parse a config file or dict; unknown keys raise ``pydantic.ValidationError``."""
    data = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return ExperimentConfig.model_validate(data)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def perceiver_config(cfg: ExperimentConfig, input_channels: int, query_channels: int, output_channels: int,
                     **decoder_kw) -> PerceiverConfig:
    m = cfg.model
    cross = AttentionConfig(num_heads=m.cross_heads, mlp_hidden_ratio=m.cross_mlp_ratio, dropout_rate=m.dropout)
    proc = AttentionConfig(num_heads=m.self_heads, mlp_hidden_ratio=m.self_mlp_ratio, dropout_rate=m.dropout)
    dec = replace(cross, **{"use_query_residual": m.decoder_query_residual, **decoder_kw})
    return PerceiverConfig(
        input_channels=input_channels,
        num_latents=m.num_latents,
        latent_channels=m.latent_channels,
        decoder_query_channels=query_channels,
        output_channels=output_channels,
        num_blocks=m.num_blocks,
        layers_per_block=m.layers_per_block,
        share_weights_across_blocks=m.share_weights,
        encoder=cross,
        processor=proc,
        decoder=dec,
        decoder_kind=m.decoder_kind,
    )


class Task(Module):
    """A model plus its data. Subclasses implement ``loss`` and ``evaluate``."""

    final_metric = "loss"

    def loss(self, rng: np.random.Generator, dropout_rng: np.random.Generator | None) -> Tensor:
        raise NotImplementedError

    def evaluate(self) -> dict[str, float]:
        raise NotImplementedError


# -- toy-mlm -------------------------------------------------------------------


def periodic_corpus(rng: np.random.Generator, num_sentences: int, words_per_sentence: int,
                    num_docs: int = 20, cycles_per_doc: int = 4) -> str:
    """Documents that repeat a fixed cycle of sentences built from distinct random words."""
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    words: list[str] = []
    while len(words) < num_sentences * words_per_sentence:
        w = "".join(rng.choice(letters, size=int(rng.integers(2, 6))))
        if w not in words:
            words.append(w)
    sentences = [
        " ".join(words[i * words_per_sentence : (i + 1) * words_per_sentence]) + "."
        for i in range(num_sentences)
    ]
    doc = " ".join(sentences * cycles_per_doc)
    return "\n\n".join([doc] * num_docs)


class MLMTask(Task):
    final_metric = "masked_accuracy"

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d, m = cfg.data, cfg.model
        self.cfg = cfg
        text = periodic_corpus(rng, d.num_sentences, d.words_per_sentence)
        self.sources = [ByteVocab.encode(g) for g in group_documents(split_documents(text), 10)]
        # Crops start at sentence boundaries.
        self.starts = [np.concatenate([[0], np.flatnonzero(s == ord(".")) + 2]) for s in self.sources]
        self.embed = Parameter("embed.tokens", truncated_normal(rng, (ByteVocab.SIZE, m.embed_channels), 0.02))
        self.positions = learned_position_table("embed.positions", d.seq_len, m.embed_channels, rng)
        self.queries = QueryBuilder(LearnedQueries(d.seq_len, m.query_channels), rng, "queries")
        self.model = PerceiverIO(perceiver_config(cfg, m.embed_channels, m.query_channels, ByteVocab.SIZE), rng)
        eval_rng = np.random.default_rng(cfg.seed + 10_000)
        self.eval_batch = mlm_batch(self.sources, d.eval_examples, d.seq_len, eval_rng, d.mask_prob, self.starts)

    def logits(self, ids: np.ndarray, rng=None) -> Tensor:
        x = ops.embedding_lookup(self.embed, ids)
        x = ops.add(x, ops.repeat_batch(self.positions, ids.shape[0]))
        return self.model(x, self.queries(), rng=rng)

    def loss(self, rng, dropout_rng=None):
        d = self.cfg.data
        b = mlm_batch(self.sources, d.batch_size, d.seq_len, rng, d.mask_prob, self.starts)
        return range_loss(self.logits(b.ids, dropout_rng), b.targets, "softmax_ce")

    def evaluate(self):
        b = self.eval_batch
        logits = self.logits(b.ids)
        return {
            "masked_accuracy": accuracy(logits, b.targets),
            "loss": range_loss(logits, b.targets, "softmax_ce").item(),
        }


# -- toy-flow --------------------------------------------------------------------


class FlowTask(Task):
    """Global-shift random-dot flow; queries are the input encodings themselves."""

    final_metric = "epe"

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d, m = cfg.data, cfg.model
        self.cfg = cfg
        size = (d.image_size, d.image_size)
        self.position = fourier_position_encoding(size, FourierSpec(num_bands=cfg.queries.fourier_bands))
        raw = 2 * d.patch_size**2 * d.image_channels + self.position.shape[1]
        self.in_proj = Linear("input_proj", raw, m.embed_channels, rng)
        self.model = PerceiverIO(
            perceiver_config(cfg, m.embed_channels, m.embed_channels, 2, use_query_residual=False), rng
        )
        eval_rng = np.random.default_rng(cfg.seed + 10_000)
        self.eval_set = self.sample(eval_rng, d.eval_examples)
        self.steps_taken = 0

    def sample(self, rng, n, max_shift=None):
        d = self.cfg.data
        shift = d.max_shift if max_shift is None else max_shift
        feats, flows = [], []
        for _ in range(n):
            f1, f2, flow = synthetic_flow_pair(
                rng, d.image_size, d.image_size, shift, d.dot_density, d.image_channels
            )
            feats.append(np.concatenate([extract_flow_patches(f1, f2, d.patch_size), self.position], axis=1))
            flows.append(flow.reshape(-1, 2))
        return np.stack(feats), np.stack(flows)

    def predict(self, feats: np.ndarray, rng=None) -> Tensor:
        x = self.in_proj(Tensor(feats))
        # The decoder is queried with the same per-pixel encoding it reads.
        out = self.model(x, x, rng=rng)
        return ops.scale(out, float(max(self.cfg.data.max_shift, 1)))

    def train_shift(self) -> int:
        d = self.cfg.data
        if d.shift_curriculum_steps == 0:
            return d.max_shift
        return min(d.max_shift, 1 + self.steps_taken // d.shift_curriculum_steps)

    def loss(self, rng, dropout_rng=None):
        feats, flows = self.sample(rng, self.cfg.data.batch_size, self.train_shift())
        self.steps_taken += 1
        return range_loss(self.predict(feats, dropout_rng), flows, "l1")

    def evaluate(self):
        feats, flows = self.eval_set
        pred = np.concatenate([self.predict(feats[i : i + 16]).data for i in range(0, len(feats), 16)])
        return {"epe": end_point_error(pred, flows), "rounded_epe": end_point_error(np.round(pred), flows)}


# -- toy-classify / compare-decoders -------------------------------------------------


def cluster_sets(rng, centers: np.ndarray, n: int, set_size: int, noise: float):
    labels = rng.integers(0, len(centers), size=n)
    x = centers[labels][:, None, :] + noise * rng.standard_normal((n, set_size, centers.shape[1]))
    return x, labels


class ClassifyTask(Task):
    """Sets of points scattered around one of ``num_classes`` centres; predict the centre."""

    final_metric = "test_accuracy"

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d, m = cfg.data, cfg.model
        self.cfg = cfg
        data_rng = np.random.default_rng(cfg.seed + 20_000)
        self.centers = 2.0 * data_rng.standard_normal((d.num_classes, d.feature_dim))
        self.train_x, self.train_y = cluster_sets(data_rng, self.centers, d.train_examples, d.set_size, d.cluster_noise)
        self.test_x, self.test_y = cluster_sets(data_rng, self.centers, d.eval_examples, d.set_size, d.cluster_noise)
        self.queries = QueryBuilder(LearnedQueries(1, m.query_channels), rng, "queries")
        self.model = PerceiverIO(perceiver_config(cfg, d.feature_dim, m.query_channels, d.num_classes), rng)

    def logits(self, x: np.ndarray, rng=None) -> Tensor:
        out = self.model(Tensor(x), self.queries(), rng=rng)
        return ops.reshape(out, (x.shape[0], self.cfg.data.num_classes))

    def loss(self, rng, dropout_rng=None):
        idx = rng.choice(len(self.train_y), size=min(self.cfg.data.batch_size, len(self.train_y)), replace=False)
        return range_loss(self.logits(self.train_x[idx], dropout_rng), self.train_y[idx], "softmax_ce")

    def evaluate(self):
        return {
            "train_accuracy": accuracy(self.logits(self.train_x), self.train_y),
            "test_accuracy": accuracy(self.logits(self.test_x), self.test_y),
        }


# -- multitask-toy -------------------------------------------------------------------


TASK_FNS = {
    "parity": lambda bits: bits.sum(axis=-1) % 2,
    "majority": lambda bits: (2 * bits.sum(axis=-1) > bits.shape[-1]).astype(np.int64),
}


class MultitaskTask(Task):
    """Binary strings with one binary label per task, all tasks from one model.

    ``per_task`` decodes one learned query per task. ``shared_token`` and
    ``task_tokens`` prepend one shared or one per-task token to the input,
    decode at those positions with learned position queries and apply a
    2-layer head per task.
    """

    final_metric = "min_task_accuracy"

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d, m = cfg.data, cfg.model
        self.cfg = cfg
        self.kind = "per_task" if cfg.queries.kind == "default" else cfg.queries.kind
        if self.kind not in ("per_task", "shared_token", "task_tokens"):
            raise ConfigError(f"multitask-toy does not support query kind {self.kind!r}")
        self.task_names = list(d.tasks)
        k = len(self.task_names)
        L = d.string_length
        self.bits = ((np.arange(2**L)[:, None] >> np.arange(L)[None, ::-1]) & 1).astype(np.int64)
        self.labels = np.stack([TASK_FNS[t](self.bits) for t in self.task_names], axis=1)
        self.num_tokens = {"per_task": 0, "shared_token": 1, "task_tokens": k}[self.kind]
        # ids: 0/1 bits, then special tokens
        self.embed = Parameter("embed.tokens", truncated_normal(rng, (2 + max(k, 1), m.embed_channels), 0.02))
        self.positions = learned_position_table("embed.positions", L + self.num_tokens, m.embed_channels, rng)
        if self.kind == "per_task":
            self.queries = QueryBuilder(PerTaskQueries(k, m.query_channels), rng, "queries")
            self.heads = []
            out = 2
        else:
            self.queries = QueryBuilder(LearnedQueries(self.num_tokens, m.query_channels), rng, "queries")
            self.heads = [MLP(f"head.{t}", m.query_channels, m.query_channels, rng) for t in self.task_names]
            self.head_out = [Linear(f"head.{t}.logits", m.query_channels, 2, rng) for t in self.task_names]
            out = m.query_channels
        self.model = PerceiverIO(perceiver_config(cfg, m.embed_channels, m.query_channels, out), rng)

    def ids(self, bits: np.ndarray) -> np.ndarray:
        special = 2 + np.arange(self.num_tokens)
        return np.concatenate([np.broadcast_to(special, (len(bits), self.num_tokens)), bits], axis=1)

    def logits(self, bits: np.ndarray, rng=None) -> Tensor:
        """``[B, K, 2]`` logits, one row per task."""
        ids = self.ids(bits)
        x = ops.add(ops.embedding_lookup(self.embed, ids), ops.repeat_batch(self.positions, len(bits)))
        out = self.model(x, self.queries(), rng=rng)
        if self.kind == "per_task":
            return out
        rows = []
        for i, (head, proj) in enumerate(zip(self.heads, self.head_out)):
            token = 0 if self.kind == "shared_token" else i
            h = ops.slice_(out, 1, token, token + 1)
            rows.append(proj(head(h)))
        return ops.concat(rows, axis=1)

    def loss(self, rng, dropout_rng=None):
        idx = rng.choice(len(self.bits), size=min(self.cfg.data.batch_size, len(self.bits)), replace=False)
        return range_loss(self.logits(self.bits[idx], dropout_rng), self.labels[idx], "softmax_ce")

    def evaluate(self):
        pred = self.logits(self.bits).data.argmax(-1)
        accs = {f"accuracy_{t}": float((pred[:, i] == self.labels[:, i]).mean()) for i, t in enumerate(self.task_names)}
        return {**accs, "min_task_accuracy": min(accs.values())}


# -- toy-multimodal-autoencode -----------------------------------------------------


def toy_av_example(rng, label: int, frames: int, size: int, samples: int, num_classes: int):
    """A square moving in a class-specific direction and a class-specific tone.

    Video values lie in [0, 1]; audio is a sinusoid mapped into [0, 1].
    """
    angle = 2 * np.pi * label / num_classes
    sq = max(2, size // 4)
    video = np.zeros((frames, size, size, 3))
    y0, x0 = rng.integers(sq, size - 2 * sq, size=2) if size > 3 * sq else (0, 0)
    color = np.eye(3)[label % 3] * 0.8 + 0.2
    for t in range(frames):
        y = int(np.clip(round(y0 + t * np.sin(angle)), 0, size - sq))
        x = int(np.clip(round(x0 + t * np.cos(angle)), 0, size - sq))
        video[t, y : y + sq, x : x + sq] = color
    freq = 4.0 * (label + 1)
    phase = rng.uniform(0, 2 * np.pi)
    tt = np.arange(samples) / samples
    audio = 0.5 + 0.4 * np.sin(2 * np.pi * freq * tt + phase)
    return video, audio


class MultimodalTask(Task):
    """Autoencode video + audio + label through one latent array.

    Each modality is patched, tagged with Fourier positions, padded with a
    learned modality vector to one width and serialised. Decoding uses
    Fourier-position queries per pixel / audio sample plus a label query.
    """

    final_metric = "label_accuracy"

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d, m = cfg.data, cfg.model
        self.cfg = cfg
        bands = cfg.queries.fourier_bands
        vp = (1, d.video_patch, d.video_patch)
        g = (d.frames, -(-d.video_size // d.video_patch), -(-d.video_size // d.video_patch))
        self.video_pos = fourier_position_encoding(g, FourierSpec(num_bands=bands))
        n_audio = -(-d.audio_samples // d.audio_patch)
        self.audio_pos = fourier_position_encoding((n_audio,), FourierSpec(num_bands=bands))
        self.vp = vp
        W = d.serialized_width
        self.specs = [
            ModalitySpec("video", int(np.prod(vp)) * 3, self.video_pos.shape[1]),
            ModalitySpec("audio", d.audio_patch, self.audio_pos.shape[1]),
            ModalitySpec("label", d.num_classes, 0),
        ]
        self.modality = ModalityEmbedding("modality", self.specs, W, rng)
        self.input_elements = g[0] * g[1] * g[2] + n_audio + 1

        pix_extents = (d.frames, d.video_size, d.video_size)
        self.pixel_pos = fourier_position_encoding(pix_extents, FourierSpec(num_bands=bands))
        self.sample_pos = fourier_position_encoding((d.audio_samples,), FourierSpec(num_bands=bands))
        qw = m.query_channels
        self.query_pads = {
            "video": Parameter("queries.video.modality", truncated_normal(rng, (qw - self.pixel_pos.shape[1],), 0.02)),
            "audio": Parameter("queries.audio.modality", truncated_normal(rng, (qw - self.sample_pos.shape[1],), 0.02)),
            "label": Parameter("queries.label.modality", truncated_normal(rng, (qw,), 0.02)),
        }
        if min(p.shape[0] for p in self.query_pads.values()) < 1:
            raise ConfigError("query_channels too small for the Fourier query features")
        self.num_pixels = int(np.prod(pix_extents))
        self.out_channels = max(3, d.num_classes)
        self.model = PerceiverIO(perceiver_config(cfg, W, qw, self.out_channels), rng)
        eval_rng = np.random.default_rng(cfg.seed + 10_000)
        self.eval_set = self.sample(eval_rng, d.eval_examples)

    @property
    def compression_ratio(self) -> float:
        m = self.cfg.model
        return self.input_elements * self.cfg.data.serialized_width / (m.num_latents * m.latent_channels)

    def sample(self, rng, n):
        d = self.cfg.data
        labels = rng.integers(0, d.num_classes, size=n)
        pairs = [toy_av_example(rng, int(c), d.frames, d.video_size, d.audio_samples, d.num_classes) for c in labels]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), labels

    def encode_inputs(self, video, audio, onehot) -> tuple[Tensor, dict]:
        rows = []
        for v, a, lab in zip(video, audio, onehot):
            vpatch = patch_video(v, self.vp)[0]
            apatch = patch_audio(a, self.cfg.data.audio_patch)[0]
            parts = {
                "video": self.modality("video", vpatch, self.video_pos),
                "audio": self.modality("audio", apatch, self.audio_pos),
                "label": self.modality("label", lab[None, :]),
            }
            x, ranges = serialize_multimodal(parts)
            rows.append(ops.reshape(x, (1, *x.shape)))
        return ops.concat(rows, axis=0), ranges

    def query_rows(self, pixel_idx, sample_idx, with_label=True) -> Tensor:
        parts = [
            build_input_array(self.pixel_pos[pixel_idx], None, self.query_pads["video"]),
            build_input_array(self.sample_pos[sample_idx], None, self.query_pads["audio"]),
        ]
        if with_label:
            parts.append(ops.reshape(self.query_pads["label"], (1, self.cfg.model.query_channels)))
        return ops.concat(parts, axis=0)

    def outputs(self, latents, pixel_idx, sample_idx, with_label=True):
        out = self.model.decode(latents, self.query_rows(pixel_idx, sample_idx, with_label))
        a, b = len(pixel_idx), len(sample_idx)
        video = ops.slice_(ops.slice_(out, 1, 0, a), 2, 0, 3)
        audio = ops.slice_(ops.slice_(out, 1, a, a + b), 2, 0, 1)
        label = ops.slice_(out, 1, a + b, a + b + 1) if with_label else None
        if label is not None and self.out_channels != self.cfg.data.num_classes:
            label = ops.slice_(label, 2, 0, self.cfg.data.num_classes)
        return video, audio, label

    def loss(self, rng, dropout_rng=None):
        d = self.cfg.data
        video, audio, labels = self.sample(rng, d.batch_size)
        onehot, _ = mask_labels(np.eye(d.num_classes)[labels], rng, d.label_mask_prob)
        x, _ = self.encode_inputs(video, audio, onehot)
        latents = self.model.process(self.model.encode(x, rng=dropout_rng), dropout_rng)
        pix = np.sort(rng.choice(self.num_pixels, size=min(d.video_queries_per_step, self.num_pixels), replace=False))
        smp = np.sort(rng.choice(d.audio_samples, size=min(d.audio_queries_per_step, d.audio_samples), replace=False))
        v_out, a_out, l_out = self.outputs(latents, pix, smp)
        B = len(labels)
        v_t = video.reshape(B, -1, 3)[:, pix]
        a_t = audio[:, smp, None]
        wv, wa, wl = d.loss_weights
        total = ops.add(
            ops.scale(range_loss(v_out, v_t, "l1"), wv), ops.scale(range_loss(a_out, a_t, "l1"), wa)
        )
        return ops.add(total, ops.scale(range_loss(l_out, labels[:, None], "softmax_ce"), wl))

    def reconstruct(self, video, audio, onehot, chunk: int = 1024):
        """Full decode in query batches: ``(video, audio, label logits)``."""
        x, _ = self.encode_inputs(video, audio, onehot)
        latents = self.model.process(self.model.encode(x))
        d = self.cfg.data
        label = self.model.decode(latents, ops.reshape(self.query_pads["label"], (1, self.cfg.model.query_channels)))
        label = ops.slice_(label, 2, 0, d.num_classes)
        v_chunks, a_chunks = [], []
        for i in range(0, self.num_pixels, chunk):
            idx = np.arange(i, min(i + chunk, self.num_pixels))
            q = build_input_array(self.pixel_pos[idx], None, self.query_pads["video"])
            v_chunks.append(ops.slice_(self.model.decode(latents, q), 2, 0, 3).data)
        for i in range(0, d.audio_samples, chunk):
            idx = np.arange(i, min(i + chunk, d.audio_samples))
            q = build_input_array(self.sample_pos[idx], None, self.query_pads["audio"])
            a_chunks.append(ops.slice_(self.model.decode(latents, q), 2, 0, 1).data)
        B = len(video)
        rec_v = np.concatenate(v_chunks, axis=1).reshape(video.shape)
        rec_a = np.concatenate(a_chunks, axis=1).reshape(audio.shape)
        return rec_v, rec_a, label.data.reshape(B, -1)

    def evaluate(self):
        d = self.cfg.data
        video, audio, labels = self.eval_set
        onehot = np.eye(d.num_classes)[labels]
        rec_v, rec_a, logits_masked = self.reconstruct(video, audio, np.zeros_like(onehot))
        _, _, logits_visible = self.reconstruct(video[:8], audio[:8], onehot[:8])
        return {
            "video_psnr": psnr(np.clip(rec_v, 0, 1), video),
            "audio_psnr": psnr(np.clip(rec_a, 0, 1), audio),
            "label_accuracy": accuracy(logits_masked, labels),
            "label_accuracy_visible": accuracy(logits_visible, labels[:8]),
            "compression_ratio": self.compression_ratio,
        }


TASK_CLASSES = {
    "toy-mlm": MLMTask,
    "toy-flow": FlowTask,
    "toy-classify": ClassifyTask,
    "multitask-toy": MultitaskTask,
    "toy-multimodal-autoencode": MultimodalTask,
}


def build_task(cfg: ExperimentConfig) -> Task:
    init_rng = _streams(cfg.seed, 3)[0]
    return TASK_CLASSES[cfg.task](cfg, init_rng)


# -- runner --------------------------------------------------------------------


class MetricWriter:
    def __init__(self, path: Path | None):
        self.rows: list[tuple[int, str, str, float]] = []
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "split", "metric", "value"])

    def write(self, step: int, split: str, metrics: dict[str, float]) -> None:
        new = [(step, split, k, float(v)) for k, v in metrics.items()]
        self.rows += new
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                w = csv.writer(fh)
                for s, sp, k, v in new:
                    w.writerow([s, sp, k, repr(v)])


def train(task: Task, cfg: ExperimentConfig, writer: MetricWriter) -> dict[str, float]:
    _, data_rng, dropout_rng = _streams(cfg.seed, 3)
    params = task.parameters()
    opt = Lamb(params, cfg.optimizer.weight_decay, cfg.optimizer.beta1, cfg.optimizer.beta2,
               clip_norm=cfg.optimizer.clip_norm)
    sched = cfg.schedule_obj()
    use_dropout = dropout_rng if cfg.model.dropout > 0 else None
    running = []
    metrics: dict[str, float] = {}
    for step in range(1, cfg.steps + 1):
        loss, grads = compute_gradients(lambda: task.loss(data_rng, use_dropout), params)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        opt.step(schedule_rate(sched, step - 1), grads)
        running.append(loss)
        if step % cfg.log_every == 0:
            writer.write(step, "train", {"loss": float(np.mean(running)), "lr": schedule_rate(sched, step - 1)})
            running = []
        if step % cfg.eval_every == 0 or step == cfg.steps:
            metrics = task.evaluate()
            writer.write(step, "eval", metrics)
    if cfg.steps == 0:
        metrics = task.evaluate()
        writer.write(0, "eval", metrics)
    return metrics


def run(config: ExperimentConfig | dict | str | Path, out_dir: str | Path | None = None) -> Path:
    """Execute one experiment and return its run directory."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir or cfg.output_dir or f"runs/{cfg.task}-{cfg.config_hash()}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    start = time.perf_counter()
    writer = MetricWriter(out / "metrics.csv")
    if cfg.task == "flops-report":
        report = preset_report(cfg.preset or "bert-base")
        (out / "flops.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        (out / "flops.txt").write_text(report.table() + "\n")
        final = {"total_flops": float(report.total_flops), "total_params": float(report.total_params)}
        writer.write(0, "report", final)
    else:
        task = build_task(cfg)
        final = train(task, cfg, writer)
        checkpoint.save_parameters(out / "checkpoint.prcv", task.parameters())
    summary = {
        "config_hash": cfg.config_hash(),
        "final_metrics": final,
        "runtime_sec": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


# -- demos -------------------------------------------------------------------------


def compare_decoders(config: ExperimentConfig | dict, seeds: int = 5) -> dict:
    """Train matched classifiers that differ only in their decoder."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if cfg.task != "toy-classify":
        raise ConfigError("compare_decoders needs a toy-classify config")
    results: dict = {}
    for kind in ("attention", "average_project"):
        accs, train_accs = [], []
        params = None
        for s in range(seeds):
            c = cfg.model_copy(update={"seed": cfg.seed + s, "model": cfg.model.model_copy(update={"decoder_kind": kind})})
            task = build_task(c)
            metrics = train(task, c, MetricWriter(None))
            accs.append(metrics["test_accuracy"])
            train_accs.append(metrics["train_accuracy"])
            params = task.model.num_parameters()
            arch = from_model_config(task.model.config, c.data.set_size, 1)
        results[kind] = {
            "test_accuracy_mean": float(np.mean(accs)),
            "test_accuracy_sd": float(np.std(accs, ddof=1)) if seeds > 1 else 0.0,
            "train_accuracy_mean": float(np.mean(train_accs)),
            "test_accuracies": accs,
            "model_params": params,
            "flops": preset_free_count(arch),
        }
    results["param_delta"] = results["attention"]["model_params"] - results["average_project"]["model_params"]
    return results


def preset_free_count(arch) -> dict:
    r = count(arch)
    return {"total_flops": r.total_flops, "decode_params": r.stage("decode").params + r.stage("projections").params}


def multitask_demo(config: ExperimentConfig | dict) -> dict:
    """Per-task accuracy for the per-task-query model and the two token baselines."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = {}
    for kind in ("per_task", "shared_token", "task_tokens"):
        c = cfg.model_copy(update={"queries": cfg.queries.model_copy(update={"kind": kind})})
        out[kind] = train(build_task(c), c, MetricWriter(None))
    return out


def multimodal_demo(config: ExperimentConfig | dict) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    task = build_task(cfg)
    untrained = task.evaluate()
    metrics = train(task, cfg, MetricWriter(None))
    return {"untrained": untrained, "trained": metrics, "compression_ratio": task.compression_ratio}
