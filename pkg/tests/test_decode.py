import numpy as np
import pytest

from headopt.decode import (
    LinearDecoder,
    decode_linear,
    decode_remote,
    default_decoder,
    load_decoder_config,
    save_decoder_config,
)
from headopt.errors import DecodeError, ShapeError
from headopt.protocol import ProtocolClient

from wire_fixture import ReferenceServer


def synth_decoder():
    w = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0]], np.float32)
    return LinearDecoder(w, np.zeros(3, np.float32))


class TestDecodeLinear:
    def test_zero_latent_constant_bias(self):
        dec = LinearDecoder(np.ones((3, 4), np.float32) * 0.1, np.array([0.2, 0.6, 1.4], np.float32))
        out = decode_linear(dec, np.zeros((4, 8, 8), np.float32))
        assert out.shape == (3, 64, 64)
        np.testing.assert_allclose(out[0], 0.2, atol=1e-6)
        np.testing.assert_allclose(out[1], 0.6, atol=1e-6)
        np.testing.assert_allclose(out[2], 1.0, atol=1e-6)  # clamped

    def test_selector_weights_replicate_channel(self):
        dec = synth_decoder()
        f = np.zeros((4, 4, 4), np.float32)
        f[1] = 0.8
        out = decode_linear(dec, f)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[1], 0.8, atol=1e-5)
        np.testing.assert_allclose(out[2], 0.0, atol=1e-6)

    def test_constant_latent_scalar_check(self, rng):
        w = rng.normal(size=(3, 4)).astype(np.float32) * 0.2
        b = rng.normal(size=3).astype(np.float32) * 0.1
        dec = LinearDecoder(w, b)
        c = rng.normal(size=4).astype(np.float32) * 0.3
        f = np.broadcast_to(c[:, None, None], (4, 4, 4)).copy()
        out = decode_linear(dec, f)
        want = np.clip(w.astype(np.float64) @ c + b, 0.0, 1.0)
        for ch in range(3):
            np.testing.assert_allclose(out[ch], want[ch], atol=1e-6)

    def test_homogeneous_with_zero_bias(self, rng):
        dec = synth_decoder()
        f = rng.uniform(0.05, 0.2, (4, 4, 4)).astype(np.float32)
        a = decode_linear(dec, 0.5 * f)
        b = 0.5 * decode_linear(dec, f)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_output_in_unit_interval(self, rng):
        dec = LinearDecoder(rng.normal(size=(3, 4)).astype(np.float32), rng.normal(size=3).astype(np.float32))
        out = decode_linear(dec, rng.normal(0, 5, (4, 8, 8)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            decode_linear(synth_decoder(), np.zeros((3, 8, 8), np.float32))


class TestDecoderConfig:
    def test_roundtrip(self, tmp_path, rng):
        dec = LinearDecoder(rng.normal(size=(3, 4)).astype(np.float32), rng.normal(size=3).astype(np.float32))
        path = tmp_path / "dec.json"
        save_decoder_config(path, dec)
        loaded = load_decoder_config(path)
        assert np.array_equal(loaded.weight, dec.weight)
        assert np.array_equal(loaded.bias, dec.bias)

    def test_bad_config(self, tmp_path):
        path = tmp_path / "dec.json"
        path.write_text('{"weight": [[1,2],[3,4]]}')
        with pytest.raises(DecodeError):
            load_decoder_config(path)

    def test_default_decoder_loads(self):
        dec = default_decoder()
        assert dec.weight.shape == (3, 4)
        assert dec.upsample_factor == 8


class TestDecodeRemote:
    def test_round_trip_shape(self):
        with ReferenceServer() as srv:
            client = ProtocolClient(srv.endpoint)
            out = decode_remote(client, np.zeros((4, 8, 8), np.float32))
            assert out.shape == (3, 64, 64)

    def test_transport_error_carries_retries(self):
        client = ProtocolClient("http://127.0.0.1:9", timeout=0.2, retries=1)
        with pytest.raises(DecodeError) as err:
            decode_remote(client, np.zeros((4, 4, 4), np.float32))
        assert err.value.retries == 2
