import math

import numpy as np
import pytest
from scipy.signal import freqz

from conftest import check_grads
from dear.channel import (
    ENHANCED_OPS,
    AttackError,
    AttackSpec,
    CodecUnavailable,
    DistortionConfig,
    ImpulseResponse,
    IrSet,
    amplitude,
    attack,
    band_pass,
    dar,
    decay_envelope,
    dropout,
    enhanced_sample,
    env_reverb,
    gaussian_noise,
    highpass_kernel,
    load_ir_dir,
    lowpass_kernel,
    median_filter,
    parse_attack,
    requantize,
    resample,
    synth_ir,
    synthetic_ir_set,
)
from dear.engine import Tensor
from dear.signal import AudioSignal, save_wav, snr

FS = 44100


def _sine(freq, n=FS, fs=FS):
    return np.sin(2 * np.pi * freq * np.arange(n) / fs)


def _gain_db(freq, alpha=1000.0, beta=4000.0):
    """Steady-state gain measured on a sine, edges excluded."""
    x = _sine(freq)
    y = band_pass(x, alpha, beta).data
    core = slice(2000, -2000)
    return 20 * math.log10(np.std(y[core]) / np.std(x[core]))


def _unit_power(n, seed=0):
    x = np.random.default_rng(seed).standard_normal(n)
    return x / np.sqrt(np.mean(x**2))


# reverb -------------------------------------------------------------------------------

def test_reverb_examples():
    x = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_allclose(env_reverb(x, ImpulseResponse(np.array([1.0]), FS)).data, x, atol=1e-12)
    delayed = env_reverb(x, ImpulseResponse(np.array([0, 0, 0, 1.0]), FS)).data
    np.testing.assert_allclose(delayed[:3], 0, atol=1e-12)
    np.testing.assert_allclose(delayed[3:], x[:-3], atol=1e-12)
    np.testing.assert_allclose(env_reverb(np.array([1.0, 0, 0]), ImpulseResponse(np.array([1.0, 0.5]), FS)).data, [1, 0.5, 0], atol=1e-12)


def test_empty_ir_is_rejected():
    with pytest.raises(ValueError):
        ImpulseResponse(np.array([]), FS)
    with pytest.raises(ValueError):
        IrSet(())


# band-pass ---------------------------------------------------------------------------

def test_sine_in_band_passes():
    assert abs(_gain_db(2000)) <= 1.0


def test_low_sine_is_attenuated():
    assert _gain_db(100) <= -30


@pytest.mark.parametrize("freq", [500.0, 8000.0])
def test_stopband(freq):
    assert _gain_db(freq) <= -30


@pytest.mark.parametrize("freq", np.linspace(1250, 3200, 9))
def test_passband_ripple(freq):
    assert abs(_gain_db(freq)) <= 1.0


def test_designed_response_matches_measurement():
    h = np.convolve(highpass_kernel(1000, FS), lowpass_kernel(4000, FS))
    for f in (500.0, 2000.0, 8000.0):
        _, resp = freqz(h, worN=[f], fs=FS)
        assert 20 * math.log10(abs(resp[0])) == pytest.approx(_gain_db(f), abs=0.1)


def test_wide_band_is_near_identity():
    x = _sine(1500) + 0.5 * _sine(2500)
    y = band_pass(x, 200.0, 12000.0).data
    core = slice(2000, -2000)
    assert np.max(np.abs(y[core] - x[core])) <= 10 ** (1 / 20) - 1


def test_cutoff_order_is_checked():
    with pytest.raises(ValueError):
        band_pass(np.ones(8), 4000, 1000)
    with pytest.raises(ValueError):
        DistortionConfig(highpass=5000, lowpass=4000)


def test_kernels_are_linear_phase():
    for h in (lowpass_kernel(4000, FS), highpass_kernel(1000, FS)):
        assert h.size == 511
        np.testing.assert_allclose(h, h[::-1])


# noise ----------------------------------------------------------------------------------

def test_noise_sigma_for_unit_power():
    x = _unit_power(1000)
    y = gaussian_noise(x, 20.0, np.random.default_rng(1)).data
    omega = np.random.default_rng(1).standard_normal(1000)
    np.testing.assert_allclose(y - x, 0.1 * omega, atol=1e-12)


def test_infinite_snr_is_identity():
    x = _unit_power(100)
    np.testing.assert_array_equal(gaussian_noise(x, math.inf, np.random.default_rng(0)).data, x)


@pytest.mark.parametrize("target", [10.0, 15.0, 20.0, 25.0])
def test_noise_calibration(target):
    x = _unit_power(44100)
    y = gaussian_noise(x, target, np.random.default_rng(int(target))).data
    assert abs(snr(x, y) - target) <= 0.2


def test_noise_on_silence_is_rejected():
    with pytest.raises(ValueError):
        gaussian_noise(np.zeros(16), 20.0, np.random.default_rng(0))


# composite channel --------------------------------------------------------------------

def test_neutral_dar_is_identity_within_ripple():
    cfg = DistortionConfig(
        highpass=50.0, lowpass=15000.0, noise=False, ir_set=IrSet((ImpulseResponse(np.array([1.0]), FS),))
    )
    x = _sine(1000) + _sine(3000)
    y = dar(x, cfg, np.random.default_rng(0)).data
    core = slice(4000, -4000)
    dev_db = 20 * math.log10(np.std(y[core]) / np.std(x[core]))
    assert abs(dev_db) <= 0.5


def test_dar_same_seed_same_output():
    cfg = DistortionConfig()
    x = _unit_power(4096)
    a = dar(x, cfg, np.random.default_rng(9)).data
    b = dar(x, cfg, np.random.default_rng(9)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, dar(x, cfg, np.random.default_rng(10)).data)


def test_component_switches():
    cfg = DistortionConfig()
    assert not cfg.without("reverb").reverb and cfg.without("reverb").noise
    with pytest.raises(ValueError):
        cfg.without("compressor")


# gradient checks ------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(1, 1, 32), (2, 1, 48), (3, 1, 64)])
def test_distortion_grads(shape):
    rng = np.random.default_rng(sum(shape))
    x = rng.standard_normal(shape)
    ir = ImpulseResponse(rng.standard_normal(9), FS)
    check_grads(lambda x: env_reverb(x, ir), {"x": x})
    check_grads(lambda x: band_pass(x, 1000.0, 4000.0), {"x": x})
    check_grads(lambda x: gaussian_noise(x, 20.0, np.random.default_rng(3)), {"x": x})
    cfg = DistortionConfig(ir_set=IrSet((ir,)))
    check_grads(lambda x: dar(x, cfg, np.random.default_rng(4)), {"x": x})
    check_grads(lambda x: resample(x, 0.9), {"x": x})
    check_grads(lambda x: dropout(x, 10), {"x": x})
    check_grads(lambda x: amplitude(x, 0.9), {"x": x})
    # distinct values keep the median selection locally constant
    spaced = rng.permutation(np.prod(shape)).reshape(shape) * 0.1
    check_grads(lambda x: median_filter(x, 3), {"x": spaced})


def test_requantize_is_straight_through():
    x = Tensor(np.array([0.5, 0.1234]), requires_grad=True)
    y = requantize(x, 8)
    (y * 1.0).backward(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


# enhanced set -------------------------------------------------------------------------

def test_enhanced_examples():
    np.testing.assert_allclose(amplitude(np.array([0.5, -0.5]), 0.9).data, [0.45, -0.45])
    assert abs(requantize(np.array([0.5]), 8).data[0] - 0.5) <= 2**-7
    assert abs(requantize(np.array([0.3337]), 8).data[0] - 0.3337) <= 2**-8
    assert median_filter(np.array([0.0, 10.0, 0.0]), 3).data[1] == 0.0


def test_dropout_zeroes_every_hundredth():
    y = dropout(np.ones(250), 100).data
    assert list(np.flatnonzero(y == 0)) == [99, 199]


def test_resample_preserves_low_tone():
    x = _sine(440, 8192)
    y = resample(x, 0.9).data
    assert y.shape == x.shape
    core = slice(200, -200)
    assert np.max(np.abs(y[core] - x[core])) < 0.02


def test_enhanced_selection_is_uniform():
    cfg = DistortionConfig(enhanced_ops=ENHANCED_OPS, noise=False, reverb=False, bandpass=False)
    rng = np.random.default_rng(0)
    x = np.random.default_rng(1).standard_normal((1, 1, 16))
    draws = 10_000
    counts: dict[str, int] = {}
    for _ in range(draws):
        _, tag = enhanced_sample(x, cfg, rng)
        counts[tag] = counts.get(tag, 0) + 1
    k = len(ENHANCED_OPS) + 1
    assert set(counts) == {"dar", *ENHANCED_OPS}
    p = 1 / k
    sigma = math.sqrt(draws * p * (1 - p))
    for tag, c in counts.items():
        assert abs(c - draws * p) <= 3 * sigma, (tag, c)


def test_enhanced_needs_ops_and_known_tags():
    with pytest.raises(ValueError):
        enhanced_sample(np.ones(8), DistortionConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        DistortionConfig(enhanced_ops=("chorus",))


# impulse responses ----------------------------------------------------------------------

def test_envelope_is_60db_down_at_rt60():
    assert 20 * math.log10(decay_envelope(0.3, 0.3)) == pytest.approx(-60.0, abs=1e-9)


def test_synthetic_tail_reaches_minus_60db_at_rt60():
    rt60, tail = 0.5, 0.1
    ir = synth_ir(np.random.default_rng(0), FS, rt60, FS, tail)
    centre = int(rt60 * FS)
    window = ir.taps[centre - 220 : centre + 221]
    level_db = 20 * math.log10(np.sqrt(np.mean(window**2)) / tail)
    assert level_db == pytest.approx(-60.0, abs=1.0)


def test_short_rt60_is_nearly_a_delta():
    ir = synth_ir(np.random.default_rng(0), 256, 1e-5)
    assert ir.taps[0] == 1.0
    assert np.max(np.abs(ir.taps[1:])) < 1e-6


def test_ir_reproducible_and_validated():
    a = synthetic_ir_set(4, seed=3)
    b = synthetic_ir_set(4, seed=3)
    for u, v in zip(a.responses, b.responses):
        np.testing.assert_array_equal(u.taps, v.taps)
    with pytest.raises(ValueError):
        synth_ir(np.random.default_rng(0), 0, 0.1)
    with pytest.raises(ValueError):
        synth_ir(np.random.default_rng(0), 10, 0.0)


def test_ir_directory(tmp_path):
    save_wav(AudioSignal(np.array([0.5, 0.25, 0.0]), FS), tmp_path / "a.wav")
    irs = load_ir_dir(tmp_path)
    np.testing.assert_allclose(irs.responses[0].taps, [1.0, 0.5, 0.0], atol=1e-7)
    with pytest.raises(ValueError):
        load_ir_dir(tmp_path / "missing")


# attacks -------------------------------------------------------------------------------

def test_parse_attack_forms():
    assert parse_attack("gaussian:20dB") == AttackSpec("gaussian_noise", {"snr": 20.0})
    assert parse_attack("amplitude:0.9").params == {"scale": 0.9}
    assert parse_attack("rerecord:ir=synthetic,snr=22") == AttackSpec(
        "simulated_rerecording", {"ir": "synthetic", "snr": 22.0}
    )
    assert parse_attack("resample:90%").params == {"ratio": 0.9}
    assert parse_attack("none").name == "identity"
    assert parse_attack("median:3").label() == "median_filter:window=3.0"
    with pytest.raises(AttackError):
        parse_attack("flanger")
    with pytest.raises(AttackError):
        parse_attack("identity:3")


def test_gaussian_attack_snr():
    sig = AudioSignal(_unit_power(FS) * 0.1, FS)
    out = attack(sig, "gaussian:20dB", seed=5)
    assert 19.8 <= snr(sig, out) <= 20.2


def test_amplitude_attack_scales_peak_exactly():
    sig = AudioSignal(_sine(300, 4000) * 0.7, FS)
    out = attack(sig, "amplitude:0.9")
    assert np.max(np.abs(out.samples)) == pytest.approx(0.9 * np.max(np.abs(sig.samples)), rel=1e-15)


def test_rerecord_attack_is_the_dar_chain():
    sig = AudioSignal(_unit_power(8192) * 0.1, FS)
    out = attack(sig, "rerecord:ir=synthetic,snr=22", seed=2)
    cfg = DistortionConfig(noise_snr_range=(22.0, 22.0))
    expected = dar(sig.samples, cfg, np.random.default_rng(2)).data
    np.testing.assert_allclose(out.samples, expected, atol=1e-12)


def test_attacks_are_seed_deterministic():
    sig = AudioSignal(_unit_power(4096) * 0.1, FS)
    for name in ("gaussian:15", "dar", "requantize:8", "median:3", "dropout", "resample:0.9", "lp:3000", "hp:500", "band_pass"):
        a, b = attack(sig, name, seed=1), attack(sig, name, seed=1)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == len(sig)


def test_mp3_without_codec(monkeypatch):
    monkeypatch.delenv("DEAR_MP3_CMD", raising=False)
    with pytest.raises(CodecUnavailable):
        attack(AudioSignal(np.ones(100) * 0.1, FS), "mp3:64")


def test_mp3_uses_configured_command(monkeypatch):
    monkeypatch.setenv("DEAR_MP3_CMD", "cp {input} {output}")
    sig = AudioSignal(_sine(440, 2000) * 0.5, FS)
    out = attack(sig, "mp3:128")
    np.testing.assert_allclose(out.samples, sig.samples, atol=2**-15)
    monkeypatch.setenv("DEAR_MP3_CMD", "false")
    with pytest.raises(CodecUnavailable):
        attack(sig, "mp3:128")
