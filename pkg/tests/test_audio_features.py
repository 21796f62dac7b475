import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tart.audio_features import (
    AUGMENTATION_KINDS, BFCC_SLICE, CHROMA_SLICE, FEATURE_DIM, MEL_SLICE, MFCC_SLICE, N_FFT, SAMPLE_RATE,
    AudioClip, WavError, augment_audio, balance_classes, bark_filterbank, bark_to_hz, chroma_map,
    extract_features_batch, extract_onset_features, hz_to_bark, hz_to_mel, materialize, mel_filterbank,
    mel_to_hz, power_frames, read_feature_matrix, read_wav, resample, write_feature_matrix, write_wav,
)
from tart.score_model import TechniqueLabel


def sine(freq, dur=1.0, sr=SAMPLE_RATE, amp=0.5):
    t = np.arange(int(dur * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def peak_freq(x, sr):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    k = int(np.argmax(spec))
    # parabolic interpolation on log magnitude
    a, b, c = np.log(spec[k - 1:k + 2] + 1e-30)
    k = k + 0.5 * (a - c) / (a - 2 * b + c)
    return k * sr / len(x)


def test_scale_conversions():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
    assert hz_to_bark(600 * np.sinh(1.0)) == pytest.approx(6.0)
    f = np.linspace(0, 11025, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    np.testing.assert_allclose(bark_to_hz(hz_to_bark(f)), f, atol=1e-9)


@pytest.mark.parametrize("bank, n", [(mel_filterbank(), 88), (bark_filterbank(), 64)])
def test_filterbanks_cover_the_spectrum(bank, n):
    assert bank.shape == (n, N_FFT // 2 + 1)
    assert (bank >= 0).all() and (bank <= 1).all()
    assert (bank.sum(axis=1) > 0).all()
    centres = bank.argmax(axis=1)
    assert (np.diff(centres) >= 0).all()


def test_chroma_map_bins():
    cm = chroma_map()
    freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    assert cm[:, freqs < 27.5].sum() == 0
    assert (cm[:, freqs >= 27.5].sum(axis=0) == 1).all()
    k = int(round(440 * N_FFT / SAMPLE_RATE))
    assert cm[9, k] == 1


def test_power_frames_peak_and_level():
    clip = sine(1000.0, amp=1.0)
    p = power_frames(clip.samples)
    k = p[0].argmax()
    assert abs(k * SAMPLE_RATE / N_FFT - 1000.0) < SAMPLE_RATE / N_FFT
    # a unit sine through a sum-normalised window peaks at (1/2)^2, about -6 dB
    assert 10 * np.log10(p[0].max()) == pytest.approx(-6.02, abs=1.5)
    assert p.shape[0] == 1 + (len(clip.samples) - N_FFT) // 512


def test_feature_vector_contract_on_sine():
    feats = extract_onset_features(sine(440.0), 0.1)
    assert feats.shape == (FEATURE_DIM,)
    assert np.isfinite(feats).all()
    chroma = feats[CHROMA_SLICE]
    assert int(np.argmax(chroma)) == 9
    assert abs(chroma.sum() - 1.0) <= 1e-9


def test_cepstra_are_ortho_dct_of_log_bands():
    # mean of DCT is DCT of mean, so the averaged coefficients still follow the explicit formula
    feats = extract_onset_features(sine(220.0), 0.0)
    log_mel = feats[MEL_SLICE]
    n = len(log_mel)
    k = np.arange(40)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    np.testing.assert_allclose(basis @ log_mel, feats[MFCC_SLICE], atol=1e-8)


def test_silence_hits_floor():
    feats = extract_onset_features(AudioClip(np.zeros(SAMPLE_RATE), SAMPLE_RATE), 0.0)
    np.testing.assert_allclose(feats[MEL_SLICE], -80.0)
    np.testing.assert_allclose(feats[CHROMA_SLICE], 1 / 12)
    assert feats[MFCC_SLICE][0] == pytest.approx(-80.0 * np.sqrt(88))
    assert feats[BFCC_SLICE][0] == pytest.approx(-80.0 * np.sqrt(64))


def test_short_clip_is_zero_padded_and_other_rates_resampled():
    clip = sine(440.0, dur=0.1, sr=44100)
    feats = extract_onset_features(clip, 0.05)
    assert np.isfinite(feats).all()
    assert int(np.argmax(feats[CHROMA_SLICE])) == 9


def test_onset_outside_clip():
    with pytest.raises(ValueError):
        extract_onset_features(sine(440.0, dur=0.5), 0.5)
    with pytest.raises(ValueError):
        extract_onset_features(sine(440.0, dur=0.5), -0.01)


@settings(max_examples=25, deadline=None)
@given(freq=st.floats(30, 5000), amp=st.floats(0, 1), onset=st.floats(0, 0.9), noise=st.booleans())
def test_features_always_finite_and_normalised(freq, amp, onset, noise):
    x = sine(freq, amp=amp).samples
    if noise:
        x = x + np.random.default_rng(0).standard_normal(len(x)) * 0.01
    feats = extract_onset_features(AudioClip(x, SAMPLE_RATE), onset)
    assert feats.shape == (180,) and np.isfinite(feats).all()
    assert abs(feats[CHROMA_SLICE].sum() - 1.0) <= 1e-9


def test_batch_matches_single():
    clip = sine(330.0)
    batch = extract_features_batch(clip, [0.0, 0.3])
    np.testing.assert_array_equal(batch[1], extract_onset_features(clip, 0.3))
    assert extract_features_batch(clip, []).shape == (0, 180)


# --- WAV ------------------------------------------------------------------------------


def test_wav_round_trip_int16_and_float():
    clip = sine(440.0, dur=0.2)
    back = read_wav(write_wav(clip))
    assert back.sample_rate == SAMPLE_RATE
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32767
    back = read_wav(write_wav(clip, float32=True))
    assert np.max(np.abs(back.samples - clip.samples)) <= 1e-7


def test_stereo_downmix():
    import io
    from scipy.io import wavfile
    buf = io.BytesIO()
    wavfile.write(buf, 8000, np.array([[16384, 0], [-16384, -16384]], dtype=np.int16))
    clip = read_wav(buf.getvalue())
    np.testing.assert_allclose(clip.samples, [0.25, -0.5])


def test_bad_wav():
    with pytest.raises(WavError):
        read_wav(b"RIFF\x00\x00")


def test_resample_preserves_frequency():
    clip = sine(1000.0, sr=44100)
    out = resample(clip, SAMPLE_RATE)
    assert len(out.samples) == SAMPLE_RATE
    assert peak_freq(out.samples, SAMPLE_RATE) == pytest.approx(1000.0, rel=2e-3)


# --- augmentation ------------------------------------------------------------------------


def test_gain_and_clipping():
    clip = sine(100.0, amp=0.5)
    np.testing.assert_allclose(augment_audio(clip, {"gain_db": -6.0}).samples, clip.samples * 10 ** (-6 / 20))
    loud = augment_audio(clip, {"gain_db": 12.0})
    assert loud.samples.max() == 1.0 and loud.samples.min() == -1.0


def test_time_shift_is_circular():
    clip = AudioClip(np.arange(100, dtype=float), 100)
    out = augment_audio(clip, {"time_shift_s": 0.05})
    np.testing.assert_array_equal(out.samples, np.roll(clip.samples, 5))


def test_noise_hits_requested_snr():
    clip = sine(440.0, amp=0.5, dur=2.0)
    out = augment_audio(clip, {"gaussian_snr_db": 20.0}, seed=1)
    noise = out.samples - clip.samples
    snr = 10 * np.log10(np.mean(clip.samples ** 2) / np.mean(noise ** 2))
    assert snr == pytest.approx(20.0, abs=0.2)
    np.testing.assert_array_equal(out.samples, augment_audio(clip, {"gaussian_snr_db": 20.0}, seed=1).samples)


def test_pitch_shift_moves_spectral_peak():
    clip = sine(440.0)
    out = augment_audio(clip, {"pitch_shift_semitones": 1.0})
    assert peak_freq(out.samples, SAMPLE_RATE) == pytest.approx(440.0 * 2 ** (1 / 12), rel=2e-3)


def test_augment_rejects_bad_specs():
    clip = sine(440.0, dur=0.1)
    with pytest.raises(ValueError):
        augment_audio(clip, {"gain_db": 1, "time_shift_s": 0.1})
    with pytest.raises(ValueError):
        augment_audio(clip, {"reverb": 1})


def test_balance_classes_reaches_minimum_and_cycles_kinds():
    labels = [TechniqueLabel.BEND] * 3 + [TechniqueLabel.SLIDE] * 30
    manifest = balance_classes(labels, min_per_class=20, classes=[TechniqueLabel.BEND, TechniqueLabel.SLIDE])
    counts = {}
    for e in manifest:
        counts[e.label] = counts.get(e.label, 0) + 1
    assert counts == {TechniqueLabel.BEND: 20, TechniqueLabel.SLIDE: 30}
    synth = [e for e in manifest if e.synthetic]
    assert len(synth) == 17
    assert {next(iter(e.augmentation)) for e in synth} == set(AUGMENTATION_KINDS)
    assert all(labels[e.source] == e.label for e in manifest)
    assert manifest == balance_classes(labels, 20, classes=[TechniqueLabel.BEND, TechniqueLabel.SLIDE])


def test_balance_classes_empty_class():
    with pytest.raises(ValueError, match="picking"):
        balance_classes([TechniqueLabel.BEND], 2)


def test_materialize():
    clips = [sine(440.0, dur=0.1), sine(220.0, dur=0.1)]
    manifest = balance_classes([TechniqueLabel.BEND, TechniqueLabel.SLIDE], 3,
                               classes=[TechniqueLabel.BEND, TechniqueLabel.SLIDE])
    out = materialize(manifest, clips)
    assert len(out) == 6
    assert out[0] is clips[0]


def test_feature_matrix_round_trip(tmp_path):
    feats = np.random.default_rng(0).standard_normal((5, 180))
    path = tmp_path / "x.feat"
    write_feature_matrix(path, feats, ["bend"] * 5)
    back, labels = read_feature_matrix(path)
    np.testing.assert_allclose(back, feats.astype(np.float32))
    assert labels == ["bend"] * 5
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_feature_matrix(path)
