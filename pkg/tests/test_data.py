import io
import json
import logging
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from momentq.data import (AnnotationError, BadMagicError, SyntheticSpec, TruncatedPayloadError,
                          UnsupportedVersionError, dataset_bytes, encode_features,
                          generate_synthetic, labels_from_windows, load_annotations,
                          load_dataset, read_features, read_matrix, read_patches,
                          sample_to_record, save_dataset, write_annotations, write_features,
                          write_patches)
from momentq.metrics import temporal_iou

SMALL = SyntheticSpec(num_videos=12, num_val=4, T=16, d=16, P=3, moments_per_video=(1, 2),
                      moment_length=(2, 4), seed=3)


# ---------------------------------------------------------------- MQFT


def test_round_trip_3x4(tmp_path):
    m = np.float32(np.random.default_rng(0).normal(size=(3, 4))).astype(np.float64)
    write_features(tmp_path / "a.mqft", m)
    assert read_features(tmp_path / "a.mqft").tobytes() == m.tobytes()


def test_layout_is_little_endian_float32(tmp_path):
    write_features(tmp_path / "a.mqft", np.array([[1.0, 2.0]]))
    raw = (tmp_path / "a.mqft").read_bytes()
    assert raw[:4] == b"MQFT"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 2)
    assert struct.unpack("<2f", raw[16:]) == (1.0, 2.0)


def test_round_trip_many_random_matrices():
    r = np.random.default_rng(1)
    for _ in range(1000):
        shape = tuple(r.integers(1, 9, size=2))
        m = r.normal(size=shape).astype(np.float32).astype(np.float64)
        back, _ = read_matrix(io.BytesIO(encode_features(m)))
        assert back.tobytes() == m.tobytes()


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 12)
    with pytest.raises(BadMagicError, match="not an MQFT file"):
        read_features(tmp_path / "x")


def test_truncated_payload(tmp_path):
    raw = encode_features(np.zeros((10, 256)))
    (tmp_path / "x").write_bytes(raw[:-256 * 4])
    with pytest.raises(TruncatedPayloadError, match="9 full rows"):
        read_features(tmp_path / "x")


def test_unsupported_version(tmp_path):
    raw = bytearray(encode_features(np.zeros((1, 1))))
    raw[4:8] = struct.pack("<I", 7)
    (tmp_path / "x").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        read_features(tmp_path / "x")


def test_error_types_are_distinct():
    assert len({BadMagicError, UnsupportedVersionError, TruncatedPayloadError}) == 3
    assert not issubclass(BadMagicError, TruncatedPayloadError)


def test_patch_trailer_round_trip(tmp_path):
    p = np.float32(np.random.default_rng(2).normal(size=(5, 3, 4))).astype(np.float64)
    write_patches(tmp_path / "p.mqft", p)
    np.testing.assert_array_equal(read_patches(tmp_path / "p.mqft"), p)


def test_float64_container_is_exact():
    m = np.random.default_rng(3).normal(size=(4, 5))
    back, _ = read_matrix(io.BytesIO(encode_features(m, version=2)))
    assert back.tobytes() == m.tobytes()


# ---------------------------------------------------------------- annotations


def _line(**kw):
    rec = {"qid": 1, "vid": "a", "duration": 30.0, "relevant_windows": [[2.0, 8.0]],
           "saliency": [0.0] * 15}
    rec.update(kw)
    return json.dumps(rec)


def test_valid_record(tmp_path):
    (tmp_path / "a.jsonl").write_text(_line() + "\n")
    (rec,) = load_annotations(tmp_path / "a.jsonl")
    assert rec.vid == "a" and rec.relevant_windows == [[2.0, 8.0]]


def test_reversed_window_rejected_and_logged(tmp_path, caplog):
    (tmp_path / "a.jsonl").write_text(_line(relevant_windows=[[20, 10]]) + "\n" + _line(qid=2)
                                      + "\n")
    with caplog.at_level(logging.WARNING):
        recs = load_annotations(tmp_path / "a.jsonl")
    assert [r.qid for r in recs] == [2]
    assert "start ≥ end" in caplog.text


def test_window_outside_duration_rejected(tmp_path, caplog):
    (tmp_path / "a.jsonl").write_text(_line(relevant_windows=[[25.0, 31.0]]) + "\n")
    with caplog.at_level(logging.WARNING):
        assert load_annotations(tmp_path / "a.jsonl") == []
    assert "outside" in caplog.text


def test_malformed_line_reports_line_number(tmp_path):
    (tmp_path / "a.jsonl").write_text(_line() + "\n{broken\n")
    with pytest.raises(AnnotationError, match=":2:"):
        load_annotations(tmp_path / "a.jsonl")


def test_annotation_round_trip(tmp_path):
    ds = generate_synthetic(SMALL)
    recs = [sample_to_record(s) for s in ds.train]
    write_annotations(tmp_path / "t.jsonl", recs)
    assert load_annotations(tmp_path / "t.jsonl") == recs


# ---------------------------------------------------------------- synthetic generator


def test_deterministic_bytes():
    assert dataset_bytes(generate_synthetic(SMALL)) == dataset_bytes(generate_synthetic(SMALL))
    assert dataset_bytes(generate_synthetic(SMALL)) != dataset_bytes(
        generate_synthetic(replace(SMALL, seed=4)))


def test_split_sizes_and_shapes():
    ds = generate_synthetic(SMALL)
    assert len(ds.train) == 8 and len(ds.val) == 4
    s = ds.train[0]
    assert s.clip_features.shape == (16, 16)
    assert s.patch_features.shape == (16, 3, 16)
    assert s.query_features.shape == (SMALL.query_tokens, 16)
    np.testing.assert_array_equal(s.clip_features, s.patch_features.max(axis=1))


def test_labels_consistent_with_windows():
    for s in generate_synthetic(SMALL).train:
        centers = (np.arange(s.num_clips) + 0.5) * s.clip_len
        inside = np.array([any(a <= c <= b for a, b in s.gt_windows) for c in centers])
        np.testing.assert_array_equal(s.saliency_labels > 0, inside)
        assert 1 <= len(s.gt_windows) <= 2
        assert all(0 <= a < b <= s.duration for a, b in s.gt_windows)


def test_hard_negative_cosine():
    spec = SyntheticSpec(num_videos=100, num_val=1, foreground_similarity=0.8, seed=5)
    ds = generate_synthetic(spec)
    cos = [float(s.meta["fg"] @ s.meta["hard"]) for s in ds.train + ds.val]
    assert abs(np.mean(cos) - 0.8) < 0.02
    assert all(c >= 0.8 - 1e-12 for c in cos)
    # the hard negative shows up in every video
    assert all(np.any(s.meta["scene"][~s.meta["is_fg"]] == 0) for s in ds.train)


def test_noiseless_nearest_prototype_recovers_windows():
    spec = replace(SMALL, noise_sigma=0.0, foreground_similarity=0.0)
    ds = generate_synthetic(spec)
    for s in ds.train:
        bank = np.vstack([ds.prototypes, s.meta["hard"][None]])
        q = int(np.argmax(bank @ s.query_features.mean(0)))
        pred = np.argmax(s.clip_features @ bank.T, axis=1) == q
        # rebuild windows from runs of predicted foreground clips
        edges = np.flatnonzero(np.diff(np.r_[0, pred.astype(int), 0]))
        windows = [[a * s.clip_len, b * s.clip_len] for a, b in zip(edges[::2], edges[1::2])]
        assert len(windows) == len(s.gt_windows)
        for w, g in zip(windows, s.gt_windows):
            assert temporal_iou(w, g) == 1.0


def test_infeasible_spec_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(SyntheticSpec(T=8, moments_per_video=(3, 3), moment_length=(4, 4)))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(num_prototypes=1))


def test_save_and_load_dataset_bit_exact(tmp_path):
    ds = generate_synthetic(SMALL)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(ds.train + ds.val, back.train + back.val):
        assert a.clip_features.tobytes() == b.clip_features.tobytes()
        assert a.query_features.tobytes() == b.query_features.tobytes()
        assert a.patch_features.tobytes() == b.patch_features.tobytes()
        assert a.gt_windows == b.gt_windows
        np.testing.assert_array_equal(a.saliency_labels, b.saliency_labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(1, 8)), min_size=1, max_size=3))
def test_labels_from_windows_center_rule(spans):
    windows = [[float(s), float(min(s + l, 16))] for s, l in spans if s < 16]
    lab = labels_from_windows(windows, 16, 1.0)
    for t in range(16):
        c = t + 0.5
        assert (lab[t] > 0) == any(a <= c <= b for a, b in windows)
