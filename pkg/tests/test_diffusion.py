import json
import math
import threading
import time
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dynsurf.diffusion import (
    DenoiserError,
    DownsampleCodec,
    IdentityCodec,
    KeyframeCache,
    NoiseSchedule,
    ProtocolError,
    RemoteDenoiser,
    ToyDenoiser,
    add_noise,
    decode_array,
    encode_array,
    nearest_keyframe,
    sds_loss,
    sds_weight,
)

# frozen oracle values, evaluated independently in float64
ALPHA_BAR_FIRST = 0.99915  # 1 - 8.5e-4
ALPHA_BAR_LAST = 0.004660098513077234  # product over the full scaled-linear schedule
E_HALF_MINUS_ONE = 0.6487212707001282
E_MINUS_ONE = 1.718281828459045


class TestSchedule:
    def test_endpoints(self):
        s = NoiseSchedule()
        assert s.alpha_bar(0.0) == pytest.approx(ALPHA_BAR_FIRST, abs=1e-15)
        assert s.alpha_bar(1.0) == pytest.approx(ALPHA_BAR_LAST, rel=1e-10)
        assert s.alpha_bar(1.0) < 0.01

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        s = NoiseSchedule()
        lo, hi = sorted((a, b))
        assert s.alpha_bar(lo) >= s.alpha_bar(hi)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            NoiseSchedule().alpha_bar(1.5)


class TestAddNoise:
    z = np.array([[[0.3, -0.2], [1.0, 0.5]]])

    def test_clean_end(self):
        eps = np.ones_like(self.z)
        out = add_noise(self.z, eps, 1.0)
        assert np.array_equal(out, self.z)

    def test_zero_noise(self):
        abar = NoiseSchedule().alpha_bar(0.4)
        assert np.allclose(add_noise(self.z, np.zeros_like(self.z), abar), math.sqrt(abar) * self.z, atol=0)

    def test_second_moment(self):
        rng = np.random.default_rng(0)
        abar = 0.3
        draws = np.stack([add_noise(self.z, rng.normal(size=self.z.shape), abar) for _ in range(20000)])
        expected = abar * self.z**2 + (1 - abar)
        assert np.allclose((draws**2).mean(axis=0), expected, atol=0.03)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            add_noise(self.z, np.zeros((2, 2)), 0.5)


class TestToyDenoiser:
    schedule = NoiseSchedule()

    def test_target_recovers_noise(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(3, 4, 4))
        eps = rng.normal(size=z.shape)
        den = ToyDenoiser(z, self.schedule)
        abar = self.schedule.alpha_bar(0.6)
        assert np.allclose(den.predict_epsilon(add_noise(z, eps, abar), 0.6, None, np.zeros(3)), eps, atol=1e-12)

    def test_closed_form_residual(self):
        rng = np.random.default_rng(2)
        z, z_star, eps = rng.normal(size=(3, 3, 2, 2))
        den = ToyDenoiser(z_star, self.schedule)
        abar = self.schedule.alpha_bar(0.25)
        direct = den.predict_epsilon(add_noise(z, eps, abar), 0.25, None, np.zeros(3)) - eps
        closed = math.sqrt(abar) / math.sqrt(1 - abar) * (z - z_star)
        assert np.max(np.abs(direct - closed)) <= 1e-10

    def test_division_guard(self):
        sched = NoiseSchedule(beta_start=0.0)
        assert sched.alpha_bar(0.0) == 1.0
        out = ToyDenoiser(np.zeros((1, 1, 1)), sched).predict_epsilon(np.ones((1, 1, 1)), 0.0, None, np.zeros(3))
        assert np.isfinite(out).all() and out[0, 0, 0] == pytest.approx(1e3)

    def test_shape_mismatch(self):
        with pytest.raises(DenoiserError):
            ToyDenoiser(np.zeros((3, 2, 2))).predict_epsilon(np.zeros((3, 4, 4)), 0.5, None, np.zeros(3))

    def test_callable_target(self):
        seen = []

        def target(reference, delta, shape):
            seen.append((reference, tuple(delta), shape))
            return np.zeros(shape)

        ToyDenoiser(target).predict_epsilon(np.zeros((3, 2, 2)), 0.5, "ref", np.array([0.0, 0.1, 0.2]))
        assert seen == [("ref", (0.0, 0.1, 0.2), (3, 2, 2))]

    def test_sds_drives_latent_to_target(self):
        rng = np.random.default_rng(3)
        z_star = rng.uniform(size=(3, 4, 4))
        z = torch.zeros(3, 4, 4, dtype=torch.float64, requires_grad=True)
        opt = torch.optim.SGD([z], lr=0.05)
        den = ToyDenoiser(z_star, self.schedule)
        for _ in range(100):
            i = rng.uniform(0.02, 0.5)
            res = sds_loss(z, IdentityCodec(), den, self.schedule, i, None, np.zeros(3), 1.0,
                           rng.normal(size=z.shape))
            opt.zero_grad()
            res.loss.backward()
            opt.step()
        assert np.max(np.abs(z.detach().numpy() - z_star)) < 1e-3


class TestSDSWeight:
    schedule = NoiseSchedule()

    def test_same_view(self):
        assert sds_weight(self.schedule, 0.3, (0, 0, 2), (0, 0, 2)) == 0.0

    def test_right_angle(self):
        w = sds_weight(self.schedule, 0.3, (2, 0, 0), (0, 2, 0))
        assert w / self.schedule.weight(0.3) == pytest.approx(E_HALF_MINUS_ONE, abs=1e-12)

    def test_antipodal(self):
        w = sds_weight(self.schedule, 0.7, (0, 0, 2), (0, 0, -3))
        assert w == pytest.approx(self.schedule.weight(0.7) * E_MINUS_ONE, abs=1e-12)


class TestSDSLoss:
    schedule = NoiseSchedule()

    def _image(self):
        return torch.linspace(0, 1, 12, dtype=torch.float64).reshape(3, 2, 2).requires_grad_()

    def test_zero_weight_gives_zero_gradient(self):
        img = self._image()
        res = sds_loss(img, IdentityCodec(), ToyDenoiser(np.zeros((3, 2, 2))), self.schedule, 0.3, None,
                       np.zeros(3), 0.0, np.ones((3, 2, 2)))
        res.loss.backward()
        assert torch.all(img.grad == 0)

    def test_at_target_gives_zero_gradient(self):
        img = self._image()
        z_star = img.detach().numpy().copy()
        eps = np.random.default_rng(4).normal(size=(3, 2, 2))
        res = sds_loss(img, IdentityCodec(), ToyDenoiser(z_star), self.schedule, 0.3, None, np.zeros(3), 0.8, eps)
        res.loss.backward()
        assert float(img.grad.abs().max()) < 1e-12

    def test_gradient_is_twice_weighted_residual(self):
        img = self._image()
        z_star = np.full((3, 2, 2), 0.25)
        eps = np.random.default_rng(5).normal(size=(3, 2, 2))
        res = sds_loss(img, IdentityCodec(), ToyDenoiser(z_star), self.schedule, 0.4, None, np.zeros(3), 0.6, eps)
        res.loss.backward()
        abar = self.schedule.alpha_bar(0.4)
        expected = 2 * 0.6 * math.sqrt(abar) / math.sqrt(1 - abar) * (img.detach().numpy() - z_star)
        assert np.allclose(img.grad.numpy(), expected, rtol=1e-9, atol=1e-12)

    def test_downsample_codec(self):
        codec = DownsampleCodec(2)
        img = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
        lat = codec.encode(img)
        assert lat.tolist() == [[[2.5, 4.5], [10.5, 12.5]]]
        assert codec.decode(lat).shape == (1, 4, 4)

    def test_wrong_reply_shape(self):
        class Bad:
            def predict_epsilon(self, *a):
                return np.zeros((1, 1, 1))

        with pytest.raises(ProtocolError):
            sds_loss(self._image(), IdentityCodec(), Bad(), self.schedule, 0.3, None, np.zeros(3), 1.0,
                     np.zeros((3, 2, 2)))


class TestKeyframes:
    def test_nearest(self):
        keys = [0, 10, 20]
        assert nearest_keyframe(14, keys) == 10
        assert nearest_keyframe(15, keys) == 10
        assert nearest_keyframe(0, keys) == 0
        with pytest.raises(ValueError):
            nearest_keyframe(3, [])

    def test_cache_encodes_once_per_keyframe(self):
        calls = []

        def image(k):
            calls.append(k)
            return np.full((3, 2, 2), float(k))

        cache = KeyframeCache.build(image, 25, 10)
        assert cache.keyframes == [0, 10, 20] and calls == [0, 10, 20] and cache.encode_count == 3
        assert cache.nearest(26) == 20 and cache.latents[10][0, 0, 0] == 10.0


class TestWireFormat:
    @given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=24))
    def test_round_trip(self, values):
        a = np.array(values, dtype=np.float64).reshape(1, 1, -1)
        assert np.array_equal(decode_array(encode_array(a)), a)

    @pytest.mark.parametrize("obj", [{}, {"shape": [2], "data": "!!"}, {"shape": [3], "data": "AAAAAA=="}, None])
    def test_malformed(self, obj):
        with pytest.raises(ProtocolError):
            decode_array(obj)


@contextmanager
def fake_server(reply_fn, delay=0.0):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            time.sleep(delay)
            code, payload = reply_fn(body)
            raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
            self.send_response(code)
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()


class TestRemoteDenoiser:
    latent = np.array([[[0.5, -1.25], [2.0, 0.125]]])

    def test_echo(self):
        with fake_server(lambda b: (200, {"version": 1, "epsilon": b["latent"]})) as url:
            out = RemoteDenoiser(url).predict_epsilon(self.latent, 0.3, np.zeros((1, 2, 2)), [0.0, 0.1, 0.2])
        assert np.array_equal(out, self.latent)

    def test_request_fields(self):
        seen = {}

        def reply(body):
            seen.update(body)
            return 200, {"epsilon": body["latent"]}

        with fake_server(reply) as url:
            RemoteDenoiser(url, guidance=7.5).predict_epsilon(self.latent, 0.3, np.ones((1, 2, 2)), [0.1, 0.2, 0.3])
        assert seen["version"] == 1 and seen["guidance"] == 7.5 and seen["delta_pose"] == [0.1, 0.2, 0.3]
        assert seen["timestep"] == 0.3 and seen["reference"]["shape"] == [1, 2, 2]

    @pytest.mark.parametrize("reply", [
        (200, b"not json"),
        (200, {"version": 1}),
        (200, {"version": 2, "epsilon": encode_array(np.zeros((1, 2, 2)))}),
        (200, {"version": 1, "epsilon": encode_array(np.zeros((1, 1, 2)))}),
        (200, {"version": 1, "epsilon": {"shape": [1, 2, 2], "data": "AAAA"}}),
    ])
    def test_malformed_reply(self, reply):
        with fake_server(lambda b: reply) as url:
            with pytest.raises(ProtocolError):
                RemoteDenoiser(url).predict_epsilon(self.latent, 0.3, self.latent, [0, 0, 0])

    def test_http_error(self):
        with fake_server(lambda b: (500, {"error": "boom"})) as url:
            with pytest.raises(DenoiserError, match="500"):
                RemoteDenoiser(url).predict_epsilon(self.latent, 0.3, self.latent, [0, 0, 0])

    def test_timeout(self):
        with fake_server(lambda b: (200, {"epsilon": b["latent"]}), delay=1.0) as url:
            t0 = time.perf_counter()
            with pytest.raises(DenoiserError):
                RemoteDenoiser(url, timeout=0.2).predict_epsilon(self.latent, 0.3, self.latent, [0, 0, 0])
            assert time.perf_counter() - t0 < 0.9

    def test_connection_refused(self):
        with fake_server(lambda b: (200, {})) as url:
            pass
        with pytest.raises(DenoiserError):
            RemoteDenoiser(url, timeout=1.0).predict_epsilon(self.latent, 0.3, self.latent, [0, 0, 0])
