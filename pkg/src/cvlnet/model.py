"""The complementary visual-linguistic classifier.

Two encoder streams, each with its own embedding tables, produce pooled
vectors. Three unshared affine heads classify the dual-stream vector, the
single-stream vector and their concatenation. Training sums the three
cross-entropy terms; the prediction comes from the concatenation head.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data_io import MemeBatch
from .encoders import DualStreamParams, SingleStreamParams, dual_stream_encode, single_stream_encode
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .representation import EmbeddingParams, Linear, TokenizedText, Vocabulary, VisualFeatures, fuse_linguistic, fuse_visual
from .tensor import Tensor, concat, cross_entropy, mul, no_grad

CHECKPOINT_MAGIC = b"CVLCKPT\x00"
CHECKPOINT_VERSION = 1

MODALITIES = ("both", "text", "visual")


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    hidden: int = 64
    heads: int = 4
    single_layers: int = 2
    text_layers: int = 1
    visual_layers: int = 1
    co_layers: int = 1
    max_len: int = 24
    max_rois: int = 8
    visual_dim: int = 2048
    init_std: float = 0.02
    modality: str = "both"
    sembedding: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.max_len < 3 or self.max_rois < 1 or self.vocab_size < 5:
            raise ConfigError("max_len >= 3, max_rois >= 1 and vocab_size >= 5 are required")

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        """BERT-base sized streams over 100 ROIs of 2048-d features."""
        return cls(vocab_size=vocab_size, hidden=768, heads=12, single_layers=12, text_layers=12,
                   visual_layers=6, co_layers=6, max_len=128, max_rois=100, visual_dim=2048)


@dataclass
class ForwardOutput:
    logits_dual: Tensor
    logits_single: Tensor
    logits_concat: Tensor

    @property
    def prob_hateful(self) -> np.ndarray:
        z = self.logits_concat.data
        return 1.0 / (1.0 + np.exp(z[..., 0] - z[..., 1]))


class CvlModel:
    """Parameters of both streams plus the three classification heads."""

    def __init__(self, config: ModelConfig, seed: int = 0, vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab
        c = config
        rng = np.random.default_rng(seed)
        std = c.init_std
        self.dual_embed = EmbeddingParams.init(rng, c.vocab_size, c.max_len, c.visual_dim, c.hidden, std)
        self.dual = DualStreamParams.init(rng, c.hidden, c.heads, c.text_layers, c.visual_layers,
                                          c.co_layers, std)
        self.single_embed = EmbeddingParams.init(rng, c.vocab_size, c.max_len, c.visual_dim, c.hidden, std)
        self.single = SingleStreamParams.init(rng, c.hidden, c.heads, c.single_layers, std)
        self.head_dual = Linear.init(rng, c.hidden, 2, std)
        self.head_single = Linear.init(rng, c.hidden, 2, std)
        self.head_concat = Linear.init(rng, 2 * c.hidden, 2, std)
        if not c.sembedding:
            for emb in (self.dual_embed, self.single_embed):
                emb.sembedding = Tensor(np.zeros_like(emb.sembedding.data))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every parameter tensor with a stable dotted name, frozen ones included."""
        out: list[tuple[str, Tensor]] = []
        for name in ("dual_embed", "dual", "single_embed", "single", "head_dual", "head_single", "head_concat"):
            out.extend(_walk(getattr(self, name), name))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    @staticmethod
    def stream_of(name: str) -> str:
        """``"single"`` for single-stream parameters, ``"dual"`` for the rest (heads included)."""
        return "single" if name.startswith("single") else "dual"


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from _walk(value, f"{prefix}.{f.name}")


def _embed(batch: MemeBatch, params: EmbeddingParams, modality: str) -> tuple[Tensor, Tensor]:
    tokens = TokenizedText(batch.token_ids, batch.symbols, batch.text_mask)
    visual = VisualFeatures(batch.roi_features, batch.boxes, batch.contextual, batch.roi_mask)
    lang = fuse_linguistic(tokens, params)
    vis = fuse_visual(visual, params)
    if modality == "text":
        vis = mul(vis, 0.0)
    elif modality == "visual":
        lang = mul(lang, 0.0)
    return lang, vis


def forward(batch: MemeBatch, model: CvlModel) -> ForwardOutput:
    if len(batch) == 0:
        raise ContractError("forward needs a non-empty batch")
    c = model.config
    if batch.token_ids.shape[-1] != c.max_len or batch.roi_features.shape[-2:] != (c.max_rois, c.visual_dim):
        raise ConfigError(
            f"batch shapes text {batch.token_ids.shape}, rois {batch.roi_features.shape} do not match "
            f"config max_len={c.max_len}, max_rois={c.max_rois}, visual_dim={c.visual_dim}")
    try:
        lang, vis = _embed(batch, model.dual_embed, c.modality)
        dual = dual_stream_encode(lang, vis, batch.text_mask, batch.roi_mask, model.dual)
        lang, vis = _embed(batch, model.single_embed, c.modality)
        single = single_stream_encode(lang, vis, batch.text_mask, batch.roi_mask, model.single)
    except DimensionError as exc:
        raise ConfigError(str(exc)) from exc
    joint = concat([dual.pooled, single.pooled], axis=-1)
    return ForwardOutput(model.head_dual(dual.pooled), model.head_single(single.pooled), model.head_concat(joint))


def loss(outputs: ForwardOutput, labels) -> Tensor:
    """Batch mean of the summed cross-entropy of all three heads."""
    if labels is None:
        raise ContractError("loss needs labels")
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ContractError("loss called on a batch with unlabeled samples")
    total = (cross_entropy(outputs.logits_dual, labels) + cross_entropy(outputs.logits_single, labels)
             + cross_entropy(outputs.logits_concat, labels))
    return total.mean()


def predict(batch: MemeBatch, model: CvlModel, chunk: int = 256) -> np.ndarray:
    """Positive-class probability for every sample in ``batch``."""
    probs = []
    with no_grad():
        for start in range(0, len(batch), chunk):
            part = batch.take(np.arange(start, min(start + chunk, len(batch))))
            probs.append(forward(part, model).prob_hateful)
    return np.concatenate(probs) if probs else np.zeros(0)


# checkpoints
#
# magic 8 bytes, version uint32, metadata length uint32, metadata JSON
# (config + vocabulary), parameter count uint32, then per parameter:
# name length uint16, name, ndim uint8, dims uint32 each, float64 data.
# All little-endian.


def checkpoint_bytes(model: CvlModel) -> bytes:
    meta = {"config": dataclasses.asdict(model.config),
            "vocab": model.vocab.words() if model.vocab is not None else None}
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: CvlModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> CvlModel:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad checkpoint metadata ({exc})") from None
    vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") is not None else None
    model = CvlModel(config, vocab=vocab)
    expected = dict(model.named_parameters())
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise FormatError(f"{path}: {count} parameters, config implies {len(expected)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name not in expected:
            raise FormatError(f"{path}: unknown parameter {name!r}")
        target = expected[name]
        if tuple(shape) != target.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {tuple(shape)}, config expects {target.shape}")
        n = int(np.prod(shape))
        target.data[...] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return model
