import numpy as np
import pytest

from prosanon.core import PROSODY_FEATURES, dumps_embedding_table
from prosanon.evaluation import EvalConfig, evaluate
from prosanon.mi import rank_dimensions
from prosanon.synth import (
    BurstTrain,
    NoiseBursts,
    Silence,
    SynthSpec,
    SynthSpecError,
    Tone,
    gen_audio,
    gen_embeddings,
    script_from_dicts,
)
from prosanon.prosody import extract_prosody, pitch_contour

FAST_EVAL = EvalConfig(resamples=10)


def test_same_spec_same_corpus():
    a = gen_embeddings(SynthSpec(seed=5))
    b = gen_embeddings(SynthSpec(seed=5))
    assert dumps_embedding_table(a.table) == dumps_embedding_table(b.table)
    assert a.prosody.raw.tobytes() == b.prosody.raw.tobytes()
    assert a.truth == b.truth and a.splits == b.splits
    assert dumps_embedding_table(gen_embeddings(SynthSpec(seed=6)).table) != dumps_embedding_table(a.table)


def test_default_shape_and_ground_truth():
    c = gen_embeddings(SynthSpec(seed=0))
    assert (c.table.n_rows, c.table.dim) == (400, 64)
    a, b = c.truth["speaker_dims"], c.truth["attribute_dims"]
    assert len(a) == 8 and len(b) == 6 and not set(a) & set(b)
    assert len(c.truth["centroids"]) == 20
    # vectors: zero-mean noise off the planted dims
    off = [d for d in range(64) if d not in a + b]
    assert abs(np.asarray(c.table.vectors)[:, off].std() - 0.5) < 0.03


def test_rows_follow_the_generative_model():
    spec = SynthSpec(seed=2, noise=1e-9, prosody_noise=0.0)
    c = gen_embeddings(spec)
    a, b = c.truth["speaker_dims"], c.truth["attribute_dims"]
    v = np.asarray(c.table.vectors)
    centroids = np.asarray(c.truth["centroids"])
    for i in (0, 57, 399):
        spk = int(c.table.speaker_ids[i][3:])
        assert np.allclose(v[i, a], centroids[spk], atol=1e-7)
        shift = 0.75 if c.table.attributes[i] == 1 else -0.75
        assert np.allclose(v[i, b], shift, atol=1e-7)


def test_prosody_is_an_affine_read_of_its_dims():
    c = gen_embeddings(SynthSpec(seed=3, prosody_noise=0.0))
    v = np.asarray(c.table.vectors)
    m = c.truth["prosody_map"]["plength"]
    expected = m["base"] + m["scale"] * (v[:, m["dims"]] @ np.asarray(m["weights"]))
    got = c.prosody.column("plength", normalized=False)
    assert np.allclose(got, np.maximum(expected, 0.0), atol=1e-9)
    nsyll = c.prosody.column("nsyll", normalized=False)
    assert np.all(nsyll == np.round(nsyll))
    assert np.all(c.prosody.column("spr", normalized=False)[nsyll == 0] == 0)


def test_speaker_prosody_is_tied_to_the_speaker_dims():
    c = gen_embeddings(SynthSpec(seed=0))
    assert set(c.truth["prosody_map"]["nrg"]["dims"]) == set(c.truth["speaker_dims"])
    assert set(c.truth["prosody_map"]["spr"]["dims"]) == set(c.truth["attribute_dims"])


def test_splits_partition_every_speaker():
    c = gen_embeddings(SynthSpec(seed=4))
    all_rows = sorted(c.splits["train"] + c.splits["val"] + c.splits["test"])
    assert all_rows == list(range(400))
    tr, pros = c.split("train")
    assert tr.n_rows == 240 and len(set(tr.speaker_ids)) == 20
    assert pros.sample_ids == tr.sample_ids


def test_no_speaker_signal_means_chance_speaker_f1():
    c = gen_embeddings(SynthSpec(seed=0, speaker_scale=0.0))
    tr, _ = c.split("train")
    te, _ = c.split("test")
    assert evaluate(tr, te, cfg=FAST_EVAL).spk_f1 <= 2 / 20


def test_no_attribute_shift_means_no_attribute_mi():
    c = gen_embeddings(SynthSpec(seed=0, attribute_shift=0.0))
    scores = rank_dimensions(c.table).scores
    # N=400: null spread of the max over 64 dims, versus ~0.5 on planted dims
    assert scores.mean() <= 0.02 and scores.max() <= 0.1


def test_default_spec_puts_attribute_dims_in_top_ten():
    c = gen_embeddings(SynthSpec(seed=0))
    assert set(c.truth["attribute_dims"]) <= set(rank_dimensions(c.table).order[:10])


def test_planted_dims_carry_five_times_more_mi():
    ratios = []
    for seed in range(10):
        c = gen_embeddings(SynthSpec(seed=seed))
        scores = rank_dimensions(c.table).scores
        b = c.truth["attribute_dims"]
        rest = [d for d in range(64) if d not in b and d not in c.truth["speaker_dims"]]
        ratios.append(scores[b].mean() / max(scores[rest].mean(), 1e-12))
    assert np.median(ratios) >= 5


def test_original_corpus_is_separable():
    spk, ad = [], []
    for seed in range(10):
        c = gen_embeddings(SynthSpec(seed=seed))
        tr, _ = c.split("train")
        te, _ = c.split("test")
        rep = evaluate(tr, te, cfg=FAST_EVAL)
        spk.append(rep.spk_f1)
        ad.append(rep.ad_f1)
    assert np.median(spk) >= 0.9 and np.median(ad) >= 0.85


@pytest.mark.parametrize(
    "kwargs",
    [
        {"noise": 0.0},
        {"speaker_dims": [1, 2], "attribute_dims": [2, 3]},
        {"speaker_dims": [70]},
        {"n_speaker_dims": 40, "n_attribute_dims": 30},
        {"split": (0.5, 0.5, 0.5)},
        {"n_speakers": 0},
    ],
)
def test_invalid_specs_raise(kwargs):
    with pytest.raises(SynthSpecError):
        gen_embeddings(SynthSpec(**kwargs))


def test_explicit_dims_are_honoured():
    c = gen_embeddings(SynthSpec(speaker_dims=[0, 1], attribute_dims=[3, 7], seed=1))
    assert c.truth["speaker_dims"] == [0, 1] and c.truth["attribute_dims"] == [3, 7]


# --- audio -----------------------------------------------------------------------


def test_tone_script_pitch():
    clip, truth = gen_audio([Tone(220, 2.0)])
    f0 = pitch_contour(clip).f0_values
    assert abs(f0[f0 > 0].mean() - 220) <= 3
    assert truth["segments"][0]["f0"] == 220


def test_silence_script_is_all_zero():
    clip, truth = gen_audio([Silence(1.0)])
    assert len(clip.samples) == 16000 and not clip.samples.any()
    assert truth["silences"] == [(0.0, 1.0)]


def test_burst_script_truth_and_extraction_agree():
    clip, truth = gen_audio([BurstTrain(4, 2.0), Silence(0.5), BurstTrain(2, 1.0)])
    assert truth["nsyll"] == 6 and len(truth["silences"]) == 1
    v = extract_prosody(clip)
    assert (v.nsyll, v.pnum) == (6, 1)


def test_noise_bursts_do_not_count_as_syllables():
    _, truth = gen_audio([NoiseBursts(3, 1.0)])
    assert truth["nsyll"] == 0


def test_audio_script_errors():
    with pytest.raises(SynthSpecError):
        gen_audio([])
    with pytest.raises(SynthSpecError):
        gen_audio([Silence(20.0), Tone(100, 11.0)])
    with pytest.raises(SynthSpecError):
        gen_audio([BurstTrain(0, 1.0)])


def test_script_from_dicts():
    segs = script_from_dicts([{"kind": "tone", "f0": 200, "dur": 1}, {"kind": "silence", "dur": 0.5}])
    assert segs == [Tone(200, 1), Silence(0.5)]
    with pytest.raises(SynthSpecError):
        script_from_dicts([{"kind": "chirp", "dur": 1}])
    with pytest.raises(SynthSpecError):
        script_from_dicts([{"kind": "tone", "dur": 1}])


def test_prosody_columns_match_feature_order():
    c = gen_embeddings(SynthSpec(seed=0))
    assert c.prosody.raw.shape == (400, len(PROSODY_FEATURES))
