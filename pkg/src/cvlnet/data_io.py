"""Dataset, feature and keyword files, plus the synthetic XOR benchmark.

File formats
------------
Dataset: JSON lines with ``id``, ``text``, optional ``label`` (0/1) and
optional ``img``, the layout of the public challenge files.

Keywords: JSON lines with ``id`` and ``keywords`` (list of strings).

Features: a binary container, all integers and floats little-endian::

    magic     8 bytes  b"CVLFEAT\\0"
    version   uint32   (1)
    visual_dim uint32
    max_rois  uint32
    count     uint32
    count records of:
        id_len uint32, id utf-8 bytes,
        n_rois uint32,
        boxes     n_rois*4 float64 (x1, y1, x2, y2 normalised to [0, 1])
        features  n_rois*visual_dim float64
        contextual visual_dim float64

A plain-text variant (JSON lines with ``id``, ``boxes``, ``roi_features``
and ``contextual``) is accepted by :func:`load_features` for hand-written
fixtures.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .representation import KeywordSet, Vocabulary, extract_keywords, tokenize

FEATURE_MAGIC = b"CVLFEAT\x00"
FEATURE_VERSION = 1
DEFAULT_MAX_ROIS = 100


@dataclass
class DatasetRecord:
    id: str
    text: str
    label: int | None = None
    img: str | None = None


@dataclass
class FeatureRecord:
    id: str
    boxes: np.ndarray
    roi_features: np.ndarray
    contextual: np.ndarray

    @property
    def n_rois(self) -> int:
        return self.boxes.shape[0]


# dataset lines


def load_dataset(path) -> list[DatasetRecord]:
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                text = obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed dataset line ({exc})") from None
            if not isinstance(text, str):
                raise FormatError(f"{path}:{lineno}: text must be a string")
            label = obj.get("label")
            if label is not None and label not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            if rid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            records.append(DatasetRecord(rid, text, label, obj.get("img")))
    return records


def write_dataset(path, records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = {"id": r.id}
            if r.img is not None:
                obj["img"] = r.img
            if r.label is not None:
                obj["label"] = r.label
            obj["text"] = r.text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# keyword files and lexicons


def load_keywords(path) -> dict[str, KeywordSet]:
    out: dict[str, KeywordSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                words = [str(w).lower() for w in obj["keywords"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed keyword line ({exc})") from None
            out[rid] = KeywordSet(rid, frozenset(words))
    return out


def write_keywords(path, keyword_sets: Iterable[KeywordSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ks in keyword_sets:
            fh.write(json.dumps({"id": ks.sample_id, "keywords": sorted(ks.keywords)}) + "\n")


def load_lexicon(path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {line.strip().lower() for line in fh if line.strip()}


# feature container


def normalize_boxes(boxes_px, width: float, height: float) -> np.ndarray:
    """Pixel corner boxes to [0, 1] coordinates."""
    boxes = np.asarray(boxes_px, dtype=np.float64)
    return np.clip(boxes / np.array([width, height, width, height]), 0.0, 1.0)


def _validate_feature(rec: FeatureRecord, visual_dim: int, max_rois: int) -> None:
    r = rec.boxes.shape[0] if rec.boxes.ndim == 2 else -1
    if (rec.boxes.shape != (r, 4) or rec.roi_features.shape != (r, visual_dim)
            or rec.contextual.shape != (visual_dim,)):
        raise FormatError(
            f"record {rec.id!r}: shapes boxes {rec.boxes.shape}, features {rec.roi_features.shape}, "
            f"contextual {rec.contextual.shape} inconsistent with visual_dim {visual_dim}")
    if r > max_rois:
        raise FormatError(f"record {rec.id!r}: {r} ROIs exceeds max_rois {max_rois}")
    for arr in (rec.boxes, rec.roi_features, rec.contextual):
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"record {rec.id!r}: non-finite values")
    b = rec.boxes
    if r and (np.any(b < 0) or np.any(b > 1) or np.any(b[:, 0] > b[:, 2]) or np.any(b[:, 1] > b[:, 3])):
        raise FormatError(f"record {rec.id!r}: boxes must satisfy 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1")


def write_features(path, records: Sequence[FeatureRecord], visual_dim: int,
                   max_rois: int = DEFAULT_MAX_ROIS) -> None:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<IIII", FEATURE_VERSION, visual_dim, max_rois, len(records)))
    for rec in records:
        _validate_feature(rec, visual_dim, max_rois)
        rid = rec.id.encode("utf-8")
        buf.write(struct.pack("<I", len(rid)))
        buf.write(rid)
        buf.write(struct.pack("<I", rec.n_rois))
        for arr in (rec.boxes, rec.roi_features, rec.contextual):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated feature file while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def uint(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64).reshape(shape)


def read_feature_header(path) -> tuple[int, int, int]:
    """``(visual_dim, max_rois, count)`` of a binary feature container."""
    with open(path, "rb") as fh:
        head = fh.read(len(FEATURE_MAGIC) + 16)
    if not head.startswith(FEATURE_MAGIC):
        raise FormatError(f"{path}: bad magic {head[:8]!r}")
    rd = _Reader(head)
    rd.take(8, "magic")
    version = rd.uint("version")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature container version {version}")
    return rd.uint("visual_dim"), rd.uint("max_rois"), rd.uint("count")


def load_features(path) -> dict[str, FeatureRecord]:
    """Read a feature container (binary, or the JSON-lines fixture variant)."""
    data = Path(path).read_bytes()
    if not data.startswith(FEATURE_MAGIC):
        if data.lstrip()[:1] in (b"{", b""):
            return _load_text_features(path, data)
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    rd = _Reader(data)
    rd.take(8, "magic")
    version = rd.uint("version")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature container version {version}")
    visual_dim, max_rois, count = rd.uint("visual_dim"), rd.uint("max_rois"), rd.uint("count")
    out: dict[str, FeatureRecord] = {}
    for _ in range(count):
        rid = rd.take(rd.uint("id length"), "id").decode("utf-8")
        try:
            r = rd.uint(f"n_rois of {rid!r}")
            if r > max_rois:
                raise FormatError(f"record {rid!r}: {r} ROIs exceeds max_rois {max_rois}")
            rec = FeatureRecord(rid, rd.floats((r, 4), "boxes"), rd.floats((r, visual_dim), "features"),
                                rd.floats((visual_dim,), "contextual"))
        except FormatError as exc:
            msg = str(exc)
            raise FormatError(msg if rid in msg else f"record {rid!r}: {msg}") from None
        _validate_feature(rec, visual_dim, max_rois)
        if rid in out:
            raise ValidationError(f"{path}: duplicate feature id {rid!r}")
        out[rid] = rec
    if rd.pos != len(data):
        raise FormatError(f"{path}: {len(data) - rd.pos} trailing bytes after {count} records")
    return out


def _load_text_features(path, data: bytes) -> dict[str, FeatureRecord]:
    out: dict[str, FeatureRecord] = {}
    visual_dim = None
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rid = str(obj["id"])
            ctx = np.asarray(obj["contextual"], dtype=np.float64)
            feats = np.asarray(obj["roi_features"], dtype=np.float64).reshape(-1, ctx.shape[0])
            boxes = np.asarray(obj["boxes"], dtype=np.float64).reshape(-1, 4)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed feature line ({exc})") from None
        visual_dim = visual_dim or ctx.shape[0]
        rec = FeatureRecord(rid, boxes, feats, ctx)
        _validate_feature(rec, visual_dim, DEFAULT_MAX_ROIS)
        if rid in out:
            raise ValidationError(f"{path}: duplicate feature id {rid!r}")
        out[rid] = rec
    return out


# batching


@dataclass
class MemeBatch:
    """B samples, padded to the model's text length T and ROI count R."""

    ids: list[str]
    token_ids: np.ndarray  # [B, T]
    symbols: np.ndarray  # [B, T]
    text_mask: np.ndarray  # [B, T]
    roi_features: np.ndarray  # [B, R, D]
    boxes: np.ndarray  # [B, R, 4]
    contextual: np.ndarray  # [B, D]
    roi_mask: np.ndarray  # [B, R]
    labels: np.ndarray | None = None  # [B], -1 where unknown

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> "MemeBatch":
        index = np.asarray(index, dtype=np.int64)
        return MemeBatch(
            [self.ids[i] for i in index],
            self.token_ids[index], self.symbols[index], self.text_mask[index],
            self.roi_features[index], self.boxes[index], self.contextual[index], self.roi_mask[index],
            None if self.labels is None else self.labels[index],
        )


def encode_dataset(
    records: Sequence[DatasetRecord],
    features: Mapping[str, FeatureRecord],
    vocab: Vocabulary,
    max_len: int,
    max_rois: int,
    visual_dim: int,
    keywords: Mapping[str, KeywordSet] | None = None,
    noun_lexicon: set[str] | None = None,
    stopwords: set[str] | None = None,
) -> MemeBatch:
    """Tokenize, assign keyword symbols and pad visual features for every record.

    A record's keywords come from ``keywords`` when it has an entry there,
    otherwise from the lexicon heuristic when lexicons are given, otherwise
    the keyword set is empty. ROIs beyond ``max_rois`` are dropped.
    """
    n = len(records)
    token_ids = np.zeros((n, max_len), dtype=np.int64)
    symbols = np.zeros((n, max_len), dtype=np.int64)
    text_mask = np.zeros((n, max_len), dtype=np.int64)
    roi = np.zeros((n, max_rois, visual_dim))
    boxes = np.zeros((n, max_rois, 4))
    ctx = np.zeros((n, visual_dim))
    roi_mask = np.zeros((n, max_rois), dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)
    for i, rec in enumerate(records):
        if keywords is not None and rec.id in keywords:
            ks = keywords[rec.id]
        elif noun_lexicon is not None:
            ks = extract_keywords(rec.text, noun_lexicon, stopwords or set(), rec.id)
        else:
            ks = None
        tok = tokenize(rec.text, vocab, max_len, ks)
        token_ids[i], symbols[i], text_mask[i] = tok.token_ids, tok.sembedding_symbols, tok.attention_mask
        try:
            feat = features[rec.id]
        except KeyError:
            raise ValidationError(f"no features for sample {rec.id!r}") from None
        if feat.contextual.shape != (visual_dim,):
            raise ValidationError(f"sample {rec.id!r}: feature width {feat.contextual.shape[0]} != {visual_dim}")
        r = min(feat.n_rois, max_rois)
        roi[i, :r] = feat.roi_features[:r]
        boxes[i, :r] = feat.boxes[:r]
        roi_mask[i, :r] = 1
        ctx[i] = feat.contextual
        if rec.label is not None:
            labels[i] = rec.label
    return MemeBatch([r.id for r in records], token_ids, symbols, text_mask, roi, boxes, ctx, roi_mask, labels)


# synthetic benchmark


@dataclass
class SynthSpec:
    """Generator settings for the XOR benchmark.

    Each sample has a text bit ``k`` (a keyword from the keyword pool is in
    the text, else a decoy word is) and a visual bit ``v`` (the contextual
    feature is prototype A, else prototype B, plus noise). The label is
    ``k XOR v``, so neither modality alone carries any signal.

    With ``hide_keywords`` the keyword and decoy words are reported in
    ``SynthData.hidden_words`` so a vocabulary can map them to UNK; the text
    bit then survives only through the keyword file.
    """

    n_samples: int = 2000
    vocab_size: int = 200
    max_len: int = 24
    n_rois: int = 8
    visual_dim: int = 32
    n_keywords: int = 8
    sigma: float = 0.1
    seed: int = 0
    balance: float = 0.5
    min_words: int = 4
    max_words: int = 12
    hide_keywords: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 <= self.balance <= 1:
            raise ValueError("balance must lie in [0, 1]")
        if self.max_words + 1 > self.max_len - 2:
            raise ValueError("max_words + 1 must fit in max_len - 2")


@dataclass
class SynthData:
    records: list[DatasetRecord]
    features: list[FeatureRecord]
    keywords: list[KeywordSet]
    prototype_a: np.ndarray
    prototype_b: np.ndarray
    text_bits: np.ndarray
    visual_bits: np.ndarray
    keyword_pool: list[str]
    decoy_pool: list[str]
    hidden_words: list[str] = field(default_factory=list)

    def subset(self, start: int, stop: int) -> "SynthData":
        sl = slice(start, stop)
        return SynthData(self.records[sl], self.features[sl], self.keywords[sl], self.prototype_a,
                         self.prototype_b, self.text_bits[sl], self.visual_bits[sl], self.keyword_pool,
                         self.decoy_pool, self.hidden_words)


def synth_generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    fillers = [f"w{i}" for i in range(spec.vocab_size)]
    kw_pool = [f"kw{i}" for i in range(spec.n_keywords)]
    decoys = [f"dc{i}" for i in range(spec.n_keywords)]
    proto_a = rng.normal(0.0, 1.0, spec.visual_dim)
    proto_b = rng.normal(0.0, 1.0, spec.visual_dim)
    while np.array_equal(proto_a, proto_b):
        proto_b = rng.normal(0.0, 1.0, spec.visual_dim)
    width = len(str(max(spec.n_samples - 1, 0)))
    records, feats, kws = [], [], []
    text_bits = np.zeros(spec.n_samples, dtype=np.int64)
    visual_bits = np.zeros(spec.n_samples, dtype=np.int64)
    for i in range(spec.n_samples):
        k = int(rng.random() < spec.balance)
        v = int(rng.random() < spec.balance)
        n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
        words = [fillers[j] for j in rng.integers(0, spec.vocab_size, n_words)]
        slot = (kw_pool if k else decoys)[int(rng.integers(0, spec.n_keywords))]
        words.insert(int(rng.integers(0, n_words + 1)), slot)
        sid = f"{i:0{width}d}"
        records.append(DatasetRecord(sid, " ".join(words), k ^ v, f"img/{sid}.png"))
        corners = rng.random((spec.n_rois, 4))
        boxes = np.stack([np.minimum(corners[:, 0], corners[:, 2]), np.minimum(corners[:, 1], corners[:, 3]),
                          np.maximum(corners[:, 0], corners[:, 2]), np.maximum(corners[:, 1], corners[:, 3])],
                         axis=1)
        roi = rng.normal(0.0, 1.0, (spec.n_rois, spec.visual_dim)) * spec.sigma
        ctx = (proto_a if v else proto_b) + rng.normal(0.0, 1.0, spec.visual_dim) * spec.sigma
        feats.append(FeatureRecord(sid, boxes, roi, ctx))
        kws.append(KeywordSet(sid, frozenset(w for w in words if w in kw_pool)))
        text_bits[i], visual_bits[i] = k, v
    hidden = sorted(kw_pool + decoys) if spec.hide_keywords else []
    return SynthData(records, feats, kws, proto_a, proto_b, text_bits, visual_bits, kw_pool, decoys, hidden)
