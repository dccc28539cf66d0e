import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from orpit.wavio import FormatError, Waveform, dequantize, quantize, read_wav, write_wav


class TestQuantize:
    def test_full_scale_clamps(self):
        np.testing.assert_array_equal(quantize(np.array([1.0, -1.0, 2.0, -2.0])),
                                      [32767, -32768, 32767, -32768])

    def test_round_half_away_from_zero(self):
        x = np.array([0.5, 1.5, -0.5, -1.5, 2.4999]) / 32768
        np.testing.assert_array_equal(quantize(x), [1, 2, -1, -2, 2])

    @given(arrays(np.int16, st.integers(1, 200)))
    def test_codes_survive(self, codes):
        np.testing.assert_array_equal(quantize(dequantize(codes)), codes)


class TestWaveform:
    @pytest.mark.parametrize("samples,rate", [([], 8000), ([np.nan], 8000), ([0.1], 0),
                                              ([[0.1, 0.2]], 8000)])
    def test_invalid(self, samples, rate):
        with pytest.raises(ValueError):
            Waveform(np.asarray(samples, dtype=float), rate)

    def test_duration(self):
        assert Waveform(np.zeros(4000), 8000).duration == 0.5


class TestRoundtrip:
    def test_quantized_data_is_bit_exact(self, tmp_path, rng):
        x = dequantize(rng.integers(-32768, 32768, size=1000).astype(np.int16))
        write_wav(tmp_path / "a.wav", Waveform(x, 8000))
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 8000
        assert back.samples.tobytes() == x.tobytes()

    def test_amplitude_one_writes_32767(self, tmp_path):
        write_wav(tmp_path / "a.wav", Waveform(np.array([1.0, 0.0]), 8000))
        assert read_wav(tmp_path / "a.wav").samples[0] == 32767 / 32768

    def test_header_is_pcm16_mono_le(self, tmp_path):
        write_wav(tmp_path / "a.wav", Waveform(np.array([0.25, -0.25]), 16000))
        raw = (tmp_path / "a.wav").read_bytes()
        assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
        fmt, channels, rate = struct.unpack("<HHI", raw[20:28])
        assert (fmt, channels, rate) == (1, 1, 16000)
        assert struct.unpack("<h", raw[44:46])[0] == 8192


class TestMalformed:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"RIFX" + b"\0" * 40)
        with pytest.raises(FormatError):
            read_wav(p)

    def test_stereo_rejected(self, tmp_path):
        import wave
        p = tmp_path / "st.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(2)
            w.setsampwidth(2)
            w.setframerate(8000)
            w.writeframes(b"\0\0" * 8)
        with pytest.raises(FormatError):
            read_wav(p)

    def test_8bit_rejected(self, tmp_path):
        import wave
        p = tmp_path / "b8.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(8000)
            w.writeframes(b"\x80" * 8)
        with pytest.raises(FormatError):
            read_wav(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "t.wav"
        write_wav(p, Waveform(np.zeros(10), 8000))
        p.write_bytes(p.read_bytes()[:20])
        with pytest.raises(FormatError):
            read_wav(p)
