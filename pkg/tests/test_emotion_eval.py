import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from einet.corpus import Utterance
from einet.emotion_eval import (EmotionExpander, FileProvider, OracleProvider, VadValues,
                                evaluate, expand_to_frames, make_provider, read_vad_file,
                                write_vad_file)
from einet.errors import InputError, LoadError


def utt(uid="utt_1", vad=VadValues(0.5, 0.5, 0.5)):
    return Utterance(uid, f"{uid}.wav", (1, 2), "neutral", "s", vad=vad)


def test_oracle_without_noise_passes_anchor_through():
    assert evaluate(utt(), OracleProvider(sigma=0.0)) == VadValues(0.5, 0.5, 0.5)


def test_oracle_noise_is_deterministic_and_clipped():
    p = OracleProvider(sigma=0.5, seed=3)
    u = utt(vad=VadValues(0.99, 0.01, 0.5))
    a, b = evaluate(u, p), evaluate(u, p)
    assert a == b
    assert np.all((a.as_array() >= 0) & (a.as_array() <= 1))
    assert evaluate(utt("other", u.vad), p) != a


def test_oracle_needs_ground_truth():
    with pytest.raises(LookupError):
        evaluate(utt(vad=None), OracleProvider())


def test_file_provider_parses_rows(tmp_path):
    path = tmp_path / "vad.txt"
    path.write_text("# id v a d\nutt_7 0.9 0.8 0.6\n")
    assert evaluate(utt("utt_7"), FileProvider(path)) == VadValues(0.9, 0.8, 0.6)
    with pytest.raises(LookupError):
        evaluate(utt("utt_8"), FileProvider(path))


def test_file_provider_rejects_out_of_range(tmp_path):
    path = tmp_path / "vad.txt"
    path.write_text("utt_7 1.3 0.8 0.6\n")
    with pytest.raises(InputError, match="valence"):
        read_vad_file(path)
    path.write_text("utt_7 0.3 0.8\n")
    with pytest.raises(LoadError):
        read_vad_file(path)


def test_vad_file_round_trip(tmp_path):
    table = {"a": VadValues(0.1, 0.2, 0.3), "b": VadValues(1.0, 0.0, 0.123456789)}
    write_vad_file(tmp_path / "v.txt", table)
    assert read_vad_file(tmp_path / "v.txt") == table


def test_make_provider_kinds(tmp_path):
    assert make_provider("oracle", sigma=0.0).kind == "oracle"
    with pytest.raises(ValueError):
        make_provider("file")
    with pytest.raises(ValueError):
        make_provider("ser")


@pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan"), float("inf")])
def test_vad_values_range(bad):
    with pytest.raises(InputError):
        VadValues(0.5, bad, 0.5)


# -- frame expansion ----------------------------------------------------------


def test_expand_single_frame_shape():
    out = expand_to_frames(VadValues(0.2, 0.4, 0.6), 1, EmotionExpander(d_emo=12, hidden=8))
    assert out.shape == (1, 12)


def test_expand_rows_identical():
    torch.manual_seed(0)
    out = expand_to_frames(VadValues(0.2, 0.4, 0.6), 10, EmotionExpander(d_emo=12, hidden=8))
    assert torch.equal(out, out[:1].expand(10, -1))


def test_expand_rejects_zero_frames():
    with pytest.raises(InputError):
        expand_to_frames(VadValues(0.5, 0.5, 0.5), 0, EmotionExpander(d_emo=4, hidden=4))


def test_expand_gradient_wrt_valence_matches_finite_difference():
    torch.manual_seed(1)
    ex = EmotionExpander(d_emo=6, hidden=8).double()
    v = torch.tensor([[0.3, 0.6, 0.4]], dtype=torch.float64, requires_grad=True)
    ex(v, 5).mean().backward()
    h = 1e-6
    up = v.detach().clone()
    up[0, 0] += h
    dn = v.detach().clone()
    dn[0, 0] -= h
    fd = (ex(up, 5).mean() - ex(dn, 5).mean()).item() / (2 * h)
    assert v.grad[0, 0].item() == pytest.approx(fd, rel=1e-4)


def test_expand_padding_invariance():
    torch.manual_seed(2)
    ex = EmotionExpander(d_emo=6, hidden=8)
    v = torch.tensor([[0.3, 0.6, 0.4], [0.9, 0.1, 0.2]])
    short = ex(v[:1], 4)
    mask = torch.zeros(2, 1, 9)
    mask[0, :, :4] = 1
    mask[1] = 1
    padded = ex(v, 9, mask)
    assert torch.allclose(padded[0, :, :4], short[0], atol=1e-6)
    assert torch.all(padded[0, :, 4:] == 0)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(0.0, 1.0)] * 3))
def test_expand_finite_over_domain(vad):
    ex = EmotionExpander(d_emo=6, hidden=8)
    assert torch.all(torch.isfinite(expand_to_frames(VadValues(*vad), 3, ex)))
