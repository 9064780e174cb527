import csv

import numpy as np
import pytest
import scipy.io.wavfile
import torch

from cycleflow.dataset import (
    CorpusError,
    ExternalSpeakerVectors,
    SpeakerEmbedder,
    SyntheticSpec,
    crop_features,
    generate_synthetic,
    load_prepared,
    make_speaker_vector,
    pair_batches,
    read_labels,
    save_prepared,
    scan_corpus,
    split_speakers,
    write_synthetic,
)


def _write_tone(path, freq, seconds=0.3):
    t = np.arange(int(16000 * seconds)) / 16000
    scipy.io.wavfile.write(path, 16000, (0.3 * np.sin(2 * np.pi * freq * t) * 32767).astype(np.int16))


@pytest.fixture
def tiny_corpus(tmp_path):
    for s, spk in enumerate(["p001", "p002"]):
        (tmp_path / spk).mkdir()
        for i in range(3):
            _write_tone(tmp_path / spk / f"{spk}_{i:03d}.wav", 150 + 40 * s + 10 * i)
    return tmp_path


def test_scan_counts(tiny_corpus):
    descs = scan_corpus(tiny_corpus)
    assert len(descs) == 6
    assert {d.speaker_id for d in descs} == {"p001", "p002"}


def test_scan_skips_unreadable_file(tiny_corpus, caplog):
    (tiny_corpus / "p001" / "broken.wav").write_bytes(b"not a wav file at all")
    descs = scan_corpus(tiny_corpus)
    assert len(descs) == 6
    assert "broken.wav" in caplog.text


def test_scan_errors(tmp_path):
    with pytest.raises(CorpusError):
        scan_corpus(tmp_path)
    (tmp_path / "p009").mkdir()
    (tmp_path / "p009" / "x.wav").write_bytes(b"junk")
    with pytest.raises(CorpusError):
        scan_corpus(tmp_path)


@pytest.mark.parametrize("seed", range(20))
def test_speaker_split_is_disjoint(seed):
    speakers = [f"p{i:03d}" for i in range(30)]
    test = split_speakers(speakers, 0.1, seed)
    assert len(test) == 3
    assert not test & (set(speakers) - test) and test <= set(speakers)


def test_scan_split_disjoint(tmp_path):
    for s in range(10):
        (tmp_path / f"s{s}").mkdir()
        _write_tone(tmp_path / f"s{s}" / "u.wav", 200)
    descs = scan_corpus(tmp_path, test_fraction=0.1, seed=3)
    train = {d.speaker_id for d in descs if d.split == "train"}
    test = {d.speaker_id for d in descs if d.split == "test"}
    assert len(test) == 1 and not train & test


# -- synthetic ---------------------------------------------------------------

def test_synthetic_full_factorial(small_synth):
    assert len(small_synth) == 16
    cells = {(u.speaker, u.content, u.pitch, u.rhythm) for u in small_synth}
    assert len(cells) == 16


def test_synthetic_is_deterministic(small_synth, tmp_path):
    again = generate_synthetic(SyntheticSpec(2, 2, 2, 2, 1, seed=7))
    for a, b in zip(small_synth, again):
        assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()
    write_synthetic(tmp_path / "a", small_synth)
    write_synthetic(tmp_path / "b", again)
    for u in small_synth:
        pa = tmp_path / "a" / u.speaker / f"{u.utt_id}.wav"
        pb = tmp_path / "b" / u.speaker / f"{u.utt_id}.wav"
        assert pa.read_bytes() == pb.read_bytes()


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_speakers=1)


def test_pitch_label_changes_contour_not_frames(small_synth, small_utts):
    by_id = {u.utt_id: u for u in small_utts}
    a = by_id["spk0_c0_p0_r1_t0"]
    b = by_id["spk0_c0_p1_r1_t0"]
    assert a.n_frames == b.n_frames
    # rise vs fall: the extracted contours move in opposite directions
    assert np.corrcoef(a.pitch.f0, b.pitch.f0)[0, 1] < -0.9
    assert np.polyfit(np.arange(a.n_frames), a.pitch.f0, 1)[0] > 0


def test_frame_labels_align(small_utts):
    for u in small_utts:
        assert len(u.frame_labels["phone"]) == u.n_frames
        assert set(np.unique(u.frame_labels["pitch_level"])) <= {0, 1, 2, 3}


def test_labels_csv(small_synth, tmp_path):
    path = write_synthetic(tmp_path, small_synth)
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert header == ["utt_id", "speaker", "content", "pitch", "rhythm"]
    labels = read_labels(path)
    assert len(labels) == 16
    assert labels["spk1_c0_p1_r0_t0"] == {"speaker": 1, "content": 0, "pitch": 1, "rhythm": 0}
    descs = scan_corpus(tmp_path)
    assert len(descs) == 16


def test_content_is_recoverable_by_nearest_centroid(small_utts):
    # per-utterance mean of the first frames: phone 1 differs between contents
    feats = np.stack([u.spectrogram.frames[3:8].mean(0) for u in small_utts])
    labels = np.array([u.labels["content"] for u in small_utts])
    train = np.array([u.labels["pitch"] == 0 for u in small_utts])
    centroids = np.stack([feats[train & (labels == c)].mean(0) for c in (0, 1)])
    pred = np.argmin(((feats[~train, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == labels[~train]).mean() > 0.5


# -- speaker vectors -----------------------------------------------------------

def test_speaker_vector_properties(small_utts):
    emb = SpeakerEmbedder(80, 16, seed=0).fit([u.spectrogram for u in small_utts])
    spk0 = [u.spectrogram for u in small_utts if u.speaker_id == "spk0"]
    spk1 = [u.spectrogram for u in small_utts if u.speaker_id == "spk1"]
    v0, v0b = make_speaker_vector(spk0, emb), make_speaker_vector(spk0, emb)
    v1 = make_speaker_vector(spk1, emb)
    np.testing.assert_array_equal(v0, v0b)
    assert np.linalg.norm(v0) == pytest.approx(1.0, abs=1e-6)
    assert float(v0 @ v1) < 0.9
    vs = {u.speaker_id: u.speaker_vector for u in small_utts}
    for u in small_utts:
        np.testing.assert_array_equal(u.speaker_vector, vs[u.speaker_id])


def test_torch_vector_matches_numpy(small_utts):
    emb = SpeakerEmbedder(80, 16, seed=1).fit([u.spectrogram for u in small_utts])
    u = small_utts[0]
    t = emb.torch_vector(torch.tensor(u.spectrogram.frames[None]))
    np.testing.assert_allclose(t[0].numpy(), emb.vector([u.spectrogram]), atol=1e-9)
    back = SpeakerEmbedder.from_state(emb.state_dict())
    np.testing.assert_allclose(back.vector([u.spectrogram]), emb.vector([u.spectrogram]))


def test_external_vectors_are_normalized():
    ext = ExternalSpeakerVectors({"a": np.array([3.0, 4.0])})
    np.testing.assert_allclose(ext.for_speaker("a"), [0.6, 0.8])


# -- pairing -------------------------------------------------------------------

def test_pairs_have_no_self_pairs(small_utts):
    stream = pair_batches(small_utts[:4], batch_size=2, seed=0, crop_len=32)
    for _ in range(50):
        batch = next(stream)
        assert len(batch) == 2
        for a, b in batch.pairs:
            assert a != b
        assert batch.spec_a.shape == batch.spec_b.shape == (2, 32, 80)
        assert batch.pitch_a.shape == (2, 32, 2)


def test_pairing_is_deterministic(small_utts):
    s1 = pair_batches(small_utts, 4, seed=5, crop_len=40)
    s2 = pair_batches(small_utts, 4, seed=5, crop_len=40)
    for _ in range(5):
        a, b = next(s1), next(s2)
        assert a.pairs == b.pairs
        np.testing.assert_array_equal(a.spec_a, b.spec_a)


def test_cross_speaker_pairs(small_utts):
    spk = {u.utt_id: u.speaker_id for u in small_utts}
    stream = pair_batches(small_utts, 8, seed=1, crop_len=16, cross_speaker=True)
    for a, b in next(stream).pairs:
        assert spk[a] != spk[b]


def test_pairing_needs_two(small_utts):
    with pytest.raises(CorpusError):
        next(pair_batches(small_utts[:1], 1))


def test_long_utterance_crop_is_exact(small_utts):
    u = small_utts[0]
    n = 4 * u.n_frames
    long_u = type(u)(u.utt_id, u.speaker_id,
                     type(u.spectrogram)(np.tile(u.spectrogram.frames, (4, 1))),
                     type(u.pitch)(np.resize(u.pitch.f0, n), np.resize(u.pitch.voiced, n)),
                     u.speaker_vector)
    spec, pitch = crop_features(long_u, 192, np.random.default_rng(0))
    assert spec.shape == (192, 80) and pitch.shape == (192, 2)
    spec, _ = crop_features(long_u, 192)
    start = (n - 192) // 2
    np.testing.assert_array_equal(spec, long_u.spectrogram.frames[start:start + 192])


def test_short_utterance_is_padded(small_utts):
    u = small_utts[0]
    spec, pitch = crop_features(u, u.n_frames + 10)
    assert spec.shape[0] == u.n_frames + 10
    assert np.all(spec[-10:] == u.spectrogram.config.log_floor_value)
    assert np.all(pitch[-10:] == 0)


def test_prepared_round_trip(small_utts, tmp_path):
    emb = SpeakerEmbedder(80, 16).fit([u.spectrogram for u in small_utts])
    save_prepared(tmp_path, small_utts, emb, {small_utts[0].utt_id: "test"})
    train, emb2 = load_prepared(tmp_path, "train")
    test, _ = load_prepared(tmp_path, "test")
    assert len(train) == 15 and len(test) == 1
    np.testing.assert_array_equal(test[0].spectrogram.frames, small_utts[0].spectrogram.frames)
    np.testing.assert_array_equal(test[0].frame_labels["phone"], small_utts[0].frame_labels["phone"])
    np.testing.assert_array_equal(emb2.mean, emb.mean)
