import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from einet.corpus import (EMOTIONS, TOY_VAD_ANCHORS, Manifest, ToyUtteranceSpec, Utterance,
                          UtteranceFeatures, build_toy_corpus, load_esd_layout, load_manifest,
                          make_batches, split_counts, synth_toy_utterance, toy_vad,
                          write_manifest)
from einet.dsp import DspConfig, energy_track, extract_f0, mel_spectrogram
from einet.emotion_eval import VadValues
from einet.errors import ConfigError, InputError, LoadError
from einet.training import masked_l1

LINES = [
    "a|a.wav|1 2 3|neutral|spk0|train|0.5 0.5 0.5|3 4 2",
    "b|b.wav|0 4|happy|spk1|valid||",
    "c|c.wav|2|sad|spk0|test",
]


def write_lines(tmp_path, lines, name="m.txt"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


# -- manifest -----------------------------------------------------------------


def test_load_three_line_manifest(tmp_path):
    m = load_manifest(write_lines(tmp_path, LINES))
    assert len(m) == 3
    a = m.by_id("a")
    assert a.phonemes == (1, 2, 3) and a.durations == (3, 4, 2)
    assert a.vad == VadValues(0.5, 0.5, 0.5)
    assert m.by_id("b").vad is None and m.by_id("c").split == "test"


def test_unknown_emotion_names_line(tmp_path):
    lines = [LINES[0], "b|b.wav|1|bored|spk0|train"]
    with pytest.raises(LoadError, match="unknown emotion at line 2"):
        load_manifest(write_lines(tmp_path, lines))


def test_duplicate_id_is_named(tmp_path):
    with pytest.raises(LoadError, match="'a'"):
        load_manifest(write_lines(tmp_path, [LINES[0], LINES[0]]))


def test_malformed_line(tmp_path):
    with pytest.raises(LoadError, match="line 1"):
        load_manifest(write_lines(tmp_path, ["only|three|fields"]))
    with pytest.raises(LoadError, match="line 1"):
        load_manifest(write_lines(tmp_path, ["a|a.wav|x y|sad|spk0|train"]))


def test_manifest_round_trip(tmp_path):
    m = load_manifest(write_lines(tmp_path, LINES))
    out = tmp_path / "again.txt"
    write_manifest(m, out)
    again = load_manifest(out)
    assert again.entries == m.entries
    assert again.phoneme_inventory == m.phoneme_inventory


def test_manifest_never_opens_audio(tmp_path):
    m = load_manifest(write_lines(tmp_path, LINES))
    assert not os.path.exists(m.audio_path(m.by_id("a")))


def test_manifest_rejects_out_of_inventory_phoneme():
    u = Utterance("x", "x.wav", (5,), "sad", "s")
    with pytest.raises(LoadError):
        Manifest([u], ["p0", "p1"])


@pytest.mark.parametrize("kw", [dict(phonemes=()), dict(emotion="bored"), dict(split="dev"),
                                dict(durations=(1,))])
def test_utterance_invariants(kw):
    base = dict(id="x", audio_path="x.wav", phonemes=(1, 2), emotion="sad", speaker="s")
    base.update(kw)
    with pytest.raises(InputError):
        Utterance(**base)


# -- ESD layout ---------------------------------------------------------------


def make_esd(root, counts):
    spk = root / "0001"
    for folder, n in counts.items():
        d = spk / folder
        d.mkdir(parents=True)
        for i in range(n):
            (d / f"0001_{folder}_{i:06d}.wav").write_bytes(b"")
    return spk


def test_esd_split_sizes(tmp_path):
    spk = make_esd(tmp_path, {"Neutral": 350, "Sad": 350, "Happy": 350})
    m = load_esd_layout(spk, "Neu-Sad")
    for emo in ("neutral", "sad"):
        sizes = [sum(1 for u in m.split(s) if u.emotion == emo) for s in ("train", "valid", "test")]
        assert sizes == [300, 30, 20]
    assert {u.emotion for u in m.entries} == {"neutral", "sad"}


def test_esd_insufficient_files_lists_counts(tmp_path):
    spk = make_esd(tmp_path, {"Neutral": 10, "Angry": 10})
    with pytest.raises(LoadError, match="insufficient utterances.*neutral=10"):
        load_esd_layout(spk, "Neu-Ang")


def test_esd_missing_folder(tmp_path):
    spk = make_esd(tmp_path, {"Neutral": 1})
    with pytest.raises(LoadError, match="missing emotion folder"):
        load_esd_layout(spk, "Neu-Sur")


def test_esd_bad_pair(tmp_path):
    with pytest.raises(ConfigError):
        load_esd_layout(tmp_path, "Neu-Bored")


# -- toy generator ------------------------------------------------------------


def test_toy_is_deterministic():
    spec = ToyUtteranceSpec("angry", 0.4, seed=9)
    w1, u1 = synth_toy_utterance(spec)
    w2, u2 = synth_toy_utterance(spec)
    assert np.array_equal(w1.samples, w2.samples)
    assert u1 == u2


def test_toy_durations_match_mel_frames():
    dsp = DspConfig()
    w, u = synth_toy_utterance(ToyUtteranceSpec("sad", 0.7, seed=3), dsp)
    assert sum(u.durations) == mel_spectrogram(w, dsp).frames.shape[0]


def test_toy_neutral_vad_is_center():
    for i in (0.1, 0.9):
        _, u = synth_toy_utterance(ToyUtteranceSpec("neutral", i, seed=1))
        assert u.vad == VadValues(0.5, 0.5, 0.5)


def test_toy_happy_pitch_std_grows_with_intensity():
    lo, _ = synth_toy_utterance(ToyUtteranceSpec("happy", 0.1, seed=4, text_seed=4))
    hi, _ = synth_toy_utterance(ToyUtteranceSpec("happy", 0.9, seed=4, text_seed=4))
    assert extract_f0(hi).voiced_f0.std() > extract_f0(lo).voiced_f0.std()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), emotion=st.sampled_from(EMOTIONS[1:]),
       pair=st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95)).filter(lambda p: abs(p[0] - p[1]) > 0.2))
def test_toy_pitch_and_energy_monotone(seed, emotion, pair):
    i1, i2 = sorted(pair)
    w1, _ = synth_toy_utterance(ToyUtteranceSpec(emotion, i1, seed=seed, text_seed=seed))
    w2, _ = synth_toy_utterance(ToyUtteranceSpec(emotion, i2, seed=seed, text_seed=seed))
    assert extract_f0(w2).voiced_f0.std() > extract_f0(w1).voiced_f0.std()
    assert energy_track(w2).rms.max() > energy_track(w1).rms.max()


def test_toy_vad_anchors_are_distinct():
    points = {tuple(np.round(toy_vad(e, 0.5).as_array(), 9)) for e in EMOTIONS[1:]}
    assert len(points) == 4
    assert toy_vad("happy", 1.0 - 1e-12).as_array() == pytest.approx(TOY_VAD_ANCHORS["happy"])


@pytest.mark.parametrize("kw", [dict(intensity=0.0), dict(intensity=1.0), dict(emotion="bored"),
                                dict(n_phonemes=(0, 3)), dict(base_f0=-1.0)])
def test_toy_spec_validation(kw):
    base = dict(emotion="happy", intensity=0.5, seed=0)
    base.update(kw)
    with pytest.raises(InputError):
        ToyUtteranceSpec(**base)


def test_build_toy_corpus_split_and_parallel_text():
    man, audio = build_toy_corpus(2, [0.3, 0.7], seed=5)
    assert len(man) == 2 * 5 * 2 == len(audio)
    sizes = tuple(len(man.split(s)) for s in ("train", "valid", "test"))
    assert sizes == split_counts(20)
    assert sum(sizes) == 20
    a, b = man.by_id("toy0000_neutral_30"), man.by_id("toy0000_sad_70")
    assert a.phonemes == b.phonemes and a.speaker == b.speaker


def test_split_counts_ratio():
    assert split_counts(350) == (300, 30, 20)
    assert split_counts(175) == (150, 15, 10)


# -- batching -----------------------------------------------------------------


def fake_features(lengths, n_mels=4, hop=8):
    utts, feats = [], {}
    for i, t in enumerate(lengths):
        uid = f"u{i}"
        utts.append(Utterance(uid, f"{uid}.wav", (1,) * (i % 3 + 1), "sad", "s"))
        feats[uid] = UtteranceFeatures(
            mel=np.full((t, n_mels), float(i)), f0=np.full(t, 100.0), voicing=np.ones(t, np.int8),
            audio=np.zeros(t * hop), vad=np.array([0.2, 0.2, 0.3]))
    return Manifest(utts, ["p0", "p1"]), feats


def test_batches_sizes():
    man, feats = fake_features([5, 6, 7, 8, 9])
    sizes = [len(b) for b in make_batches(man, "train", 2, 0, feats, hop_length=8)]
    assert sizes == [2, 2, 1]


def test_batches_same_seed_same_order():
    man, feats = fake_features(list(range(3, 13)))
    order = lambda seed: [b.ids for b in make_batches(man, "train", 3, seed, feats, 8)]
    assert order(4) == order(4)
    assert order(4) != order(5)


def test_batch_errors():
    man, feats = fake_features([5])
    with pytest.raises(ConfigError):
        next(make_batches(man, "train", 0, 0, feats))
    with pytest.raises(InputError):
        next(make_batches(man, "test", 1, 0, feats))


def test_padding_contributes_nothing_to_loss():
    man, feats = fake_features([7, 3])
    batch = next(make_batches(man, "train", 2, None, feats, hop_length=8, shuffle=False))
    assert batch.mel_lengths.tolist() == [7, 3]
    mask = (torch.arange(7)[None] < batch.mel_lengths[:, None]).float().unsqueeze(1)
    pred = torch.zeros_like(batch.mel, requires_grad=True)
    loss = masked_l1(pred, batch.mel, mask)
    loss.backward()
    assert torch.all(pred.grad[1, :, 3:] == 0)
    garbage = batch.mel.clone()
    garbage[1, :, 3:] = 1e6
    assert masked_l1(pred, garbage, mask).item() == loss.item()
