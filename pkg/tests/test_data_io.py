import json
import math
import struct

import numpy as np
import pytest

from cvlnet.data_io import (FEATURE_MAGIC, DatasetRecord, FeatureRecord, SynthSpec, encode_dataset, load_dataset,
                            load_features, load_keywords, load_lexicon, normalize_boxes, read_feature_header,
                            synth_generate, write_dataset, write_features, write_keywords)
from cvlnet.errors import FormatError, ValidationError
from cvlnet.representation import UNK, KeywordSet, Vocabulary


def feature(rid, r, d, rng):
    corners = np.sort(rng.random((r, 2, 2)), axis=1)
    boxes = corners.reshape(r, 4)  # rows (x1, y1, x2, y2)
    return FeatureRecord(rid, boxes, rng.normal(size=(r, d)), rng.normal(size=d))


class TestDataset:
    def write(self, tmp_path, *lines):
        path = tmp_path / "d.jsonl"
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    def test_labeled_and_unlabeled(self, tmp_path):
        path = self.write(tmp_path, '{"id": "a", "text": "hi", "label": 1}', '{"id": 7, "text": "yo"}')
        a, b = load_dataset(path)
        assert (a.id, a.text, a.label) == ("a", "hi", 1)
        assert (b.id, b.label) == ("7", None)

    def test_duplicate_id(self, tmp_path):
        path = self.write(tmp_path, '{"id": "a", "text": "x"}', '{"id": "a", "text": "y"}')
        with pytest.raises(ValidationError, match="'a'"):
            load_dataset(path)

    def test_malformed_line_number(self, tmp_path):
        path = self.write(tmp_path, '{"id": "a", "text": "x"}', "", '{"id": "b", "text":')
        with pytest.raises(FormatError, match=r":3:"):
            load_dataset(path)

    def test_missing_text(self, tmp_path):
        with pytest.raises(FormatError, match=":1:"):
            load_dataset(self.write(tmp_path, '{"id": "a"}'))

    def test_bad_label(self, tmp_path):
        with pytest.raises(ValidationError):
            load_dataset(self.write(tmp_path, '{"id": "a", "text": "x", "label": 2}'))

    def test_round_trip(self, tmp_path):
        recs = [DatasetRecord("1", "ünïcode text", 0, "img/1.png"), DatasetRecord("2", "b", None)]
        write_dataset(tmp_path / "d.jsonl", recs)
        assert load_dataset(tmp_path / "d.jsonl") == recs


class TestKeywordsAndLexicons:
    def test_round_trip(self, tmp_path):
        sets = [KeywordSet("a", frozenset({"dog", "cat"})), KeywordSet("b", frozenset())]
        write_keywords(tmp_path / "k.jsonl", sets)
        assert load_keywords(tmp_path / "k.jsonl") == {s.sample_id: s for s in sets}

    def test_lowercased(self, tmp_path):
        (tmp_path / "k.jsonl").write_text('{"id": "a", "keywords": ["Dog"]}\n')
        assert load_keywords(tmp_path / "k.jsonl")["a"].keywords == {"dog"}

    def test_malformed(self, tmp_path):
        (tmp_path / "k.jsonl").write_text('{"id": "a"}\n')
        with pytest.raises(FormatError, match=":1:"):
            load_keywords(tmp_path / "k.jsonl")

    def test_lexicon(self, tmp_path):
        (tmp_path / "l.txt").write_text("Dog\n\ncat\n")
        assert load_lexicon(tmp_path / "l.txt") == {"dog", "cat"}


class TestFeatures:
    def test_empty_container(self, tmp_path):
        write_features(tmp_path / "f.bin", [], 16)
        assert load_features(tmp_path / "f.bin") == {}
        assert read_feature_header(tmp_path / "f.bin") == (16, 100, 0)
        (tmp_path / "f.txt").write_text("")
        assert load_features(tmp_path / "f.txt") == {}

    def test_round_trip_bitwise(self, tmp_path, rng):
        recs = [feature("a", 3, 5, rng), feature("bé", 0, 5, rng), feature("c", 7, 5, rng)]
        write_features(tmp_path / "f.bin", recs, 5, 8)
        back = load_features(tmp_path / "f.bin")
        assert list(back) == ["a", "bé", "c"]
        for rec in recs:
            got = back[rec.id]
            for name in ("boxes", "roi_features", "contextual"):
                assert getattr(got, name).tobytes() == getattr(rec, name).tobytes()

    def test_write_read_write_identical(self, tmp_path, rng):
        write_features(tmp_path / "a.bin", [feature(str(i), i, 4, rng) for i in range(5)], 4, 6)
        dim, max_rois, _ = read_feature_header(tmp_path / "a.bin")
        write_features(tmp_path / "b.bin", list(load_features(tmp_path / "a.bin").values()), dim, max_rois)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_full_scale_record(self, tmp_path, rng):
        write_features(tmp_path / "f.bin", [feature("big", 100, 2048, rng)], 2048)
        assert load_features(tmp_path / "f.bin")["big"].roi_features.shape == (100, 2048)

    def test_layout(self, tmp_path):
        rec = FeatureRecord("x", np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[2.0]]), np.array([3.0]))
        write_features(tmp_path / "f.bin", [rec], 1, 1)
        expected = (FEATURE_MAGIC + struct.pack("<IIIII", 1, 1, 1, 1, 1) + b"x" + struct.pack("<I", 1)
                    + struct.pack("<6d", 0, 0, 1, 1, 2, 3))
        assert (tmp_path / "f.bin").read_bytes() == expected

    def test_text_variant(self, tmp_path):
        line = {"id": "t", "boxes": [[0, 0, 0.5, 0.5]], "roi_features": [[1.0, 2.0]], "contextual": [3.0, 4.0]}
        (tmp_path / "f.jsonl").write_text(json.dumps(line) + "\n")
        rec = load_features(tmp_path / "f.jsonl")["t"]
        assert rec.roi_features.tolist() == [[1.0, 2.0]] and rec.n_rois == 1

    def good_bytes(self, tmp_path, rng):
        write_features(tmp_path / "f.bin", [feature("rec1", 2, 3, rng), feature("rec2", 2, 3, rng)], 3, 4)
        return (tmp_path / "f.bin").read_bytes()

    @pytest.mark.parametrize("mutate, message", [
        (lambda b: b"NOTMAGIC" + b[8:], "bad magic"),
        (lambda b: b[:8] + struct.pack("<I", 2) + b[12:], "version"),
        (lambda b: b[:-8], "'rec2'"),
        (lambda b: b + b"\x00\x00", "trailing"),
    ])
    def test_malformed_container(self, tmp_path, rng, mutate, message):
        (tmp_path / "bad.bin").write_bytes(mutate(self.good_bytes(tmp_path, rng)))
        with pytest.raises(FormatError, match=message):
            load_features(tmp_path / "bad.bin")

    def test_roi_count_over_header_limit(self, tmp_path, rng):
        raw = bytearray(self.good_bytes(tmp_path, rng))
        struct.pack_into("<I", raw, 8 + 16 + 4 + 4, 9)  # n_rois of the first record
        (tmp_path / "bad.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="'rec1'"):
            load_features(tmp_path / "bad.bin")

    def test_bad_box_names_record(self, tmp_path, rng):
        rec = feature("oops", 2, 3, rng)
        rec.boxes[0] = [0.6, 0.1, 0.2, 0.9]
        with pytest.raises(FormatError, match="'oops'"):
            write_features(tmp_path / "f.bin", [rec], 3, 4)

    def test_non_finite_names_record(self, tmp_path, rng):
        raw = bytearray(self.good_bytes(tmp_path, rng))
        struct.pack_into("<d", raw, len(raw) - 8, math.nan)
        (tmp_path / "bad.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="'rec2'.*non-finite"):
            load_features(tmp_path / "bad.bin")

    def test_normalize_boxes(self):
        np.testing.assert_array_equal(normalize_boxes([[10, 20, 110, 220]], 200, 400), [[0.05, 0.05, 0.55, 0.55]])


class TestEncodeDataset:
    def setup(self, rng):
        recs = [DatasetRecord("a", "the dog runs", 1), DatasetRecord("b", "a cat", None)]
        feats = {"a": feature("a", 5, 3, rng), "b": feature("b", 1, 3, rng)}
        return recs, feats, Vocabulary(["the", "dog", "runs", "a"])

    def test_truncation_padding_and_labels(self, rng):
        recs, feats, vocab = self.setup(rng)
        batch = encode_dataset(recs, feats, vocab, 6, 3, 3)
        assert batch.roi_mask.tolist() == [[1, 1, 1], [1, 0, 0]]
        np.testing.assert_array_equal(batch.roi_features[0], feats["a"].roi_features[:3])
        np.testing.assert_array_equal(batch.roi_features[1, 1:], 0.0)
        assert batch.labels.tolist() == [1, -1]
        assert batch.token_ids[1, 2] == UNK

    def test_keyword_priority(self, rng):
        recs, feats, vocab = self.setup(rng)
        file_kw = {"a": KeywordSet("a", frozenset({"runs"}))}
        batch = encode_dataset(recs, feats, vocab, 6, 3, 3, file_kw, {"dog", "cat"}, {"the"})
        assert batch.symbols[0].tolist() == [1, 1, 1, 2, 1, 0]  # file wins for a
        assert batch.symbols[1].tolist() == [1, 1, 2, 1, 0, 0]  # heuristic for b
        plain = encode_dataset(recs, feats, vocab, 6, 3, 3)
        assert not np.any(plain.symbols == 2)

    def test_missing_features(self, rng):
        recs, feats, vocab = self.setup(rng)
        del feats["b"]
        with pytest.raises(ValidationError, match="'b'"):
            encode_dataset(recs, feats, vocab, 6, 3, 3)


class TestSynth:
    def test_noise_free_xor(self):
        data = synth_generate(SynthSpec(n_samples=300, sigma=0.0, seed=4))
        for rec, f, k, v in zip(data.records, data.features, data.text_bits, data.visual_bits):
            assert rec.label == k ^ v
            np.testing.assert_array_equal(f.contextual, data.prototype_a if v else data.prototype_b)
            np.testing.assert_array_equal(f.roi_features, 0.0)
        both = [(r, f) for r, f, k, v in zip(data.records, data.features, data.text_bits, data.visual_bits)
                if k == 1 and v == 1]
        assert both and all(r.label == 0 for r, _ in both)

    def test_label_marginal_and_single_modality_chance(self):
        data = synth_generate(SynthSpec(n_samples=2000, seed=0))
        labels = np.array([r.label for r in data.records])
        bound = 3 * math.sqrt(0.25 / 2000)
        assert abs(labels.mean() - 0.5) <= bound
        for bits in (data.text_bits, data.visual_bits):
            for value in (0, 1):
                sub = labels[bits == value]
                assert abs(sub.mean() - 0.5) <= 3 * math.sqrt(0.25 / len(sub))

    def test_keyword_file_matches_text_bit(self):
        data = synth_generate(SynthSpec(n_samples=200, seed=1))
        for rec, ks, k in zip(data.records, data.keywords, data.text_bits):
            assert bool(ks.keywords) == bool(k)
            assert ks.keywords <= set(rec.text.split())

    def test_ids_consistent_across_outputs(self):
        data = synth_generate(SynthSpec(n_samples=50, seed=2))
        ids = [r.id for r in data.records]
        assert len(set(ids)) == 50
        assert ids == [f.id for f in data.features] == [k.sample_id for k in data.keywords]

    def test_prototypes_distinct(self):
        data = synth_generate(SynthSpec(n_samples=1, seed=3))
        assert not np.array_equal(data.prototype_a, data.prototype_b)

    def test_files_byte_identical(self, tmp_path):
        outputs = []
        for run in ("a", "b"):
            data = synth_generate(SynthSpec(n_samples=40, seed=9))
            d = tmp_path / run
            d.mkdir()
            write_dataset(d / "d.jsonl", data.records)
            write_features(d / "f.bin", data.features, 32, 8)
            write_keywords(d / "k.jsonl", data.keywords)
            outputs.append([(d / n).read_bytes() for n in ("d.jsonl", "f.bin", "k.jsonl")])
        assert outputs[0] == outputs[1]

    def test_hidden_keywords_become_unk(self):
        data = synth_generate(SynthSpec(n_samples=100, seed=5, hide_keywords=True))
        vocab = Vocabulary.build((r.text for r in data.records), exclude=data.hidden_words)
        batch = encode_dataset(data.records, {f.id: f for f in data.features}, vocab, 24, 8, 32,
                               {k.sample_id: k for k in data.keywords})
        # the slot word is UNK for every sample; only the symbol channel tells keyword from decoy
        assert np.all((batch.token_ids == UNK).sum(axis=1) == 1)
        np.testing.assert_array_equal((batch.symbols == 2).any(axis=1), data.text_bits == 1)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(sigma=-1.0)
