"""Noise schedule, denoiser abstraction and score-distillation loss.

The denoiser contract is ``predict_epsilon(noisy_latent, timestep,
reference, delta_pose) -> epsilon`` on numpy arrays of shape ``(C, H, W)``.
Two implementations live here: :class:`ToyDenoiser`, an analytic
epsilon-predictor that pulls latents toward a known target, and
:class:`RemoteDenoiser`, an HTTP client for the ``/v1/denoise`` protocol.
"""

from __future__ import annotations

import base64
import json
import math
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import angular_distance

__all__ = [
    "NoiseSchedule",
    "Denoiser",
    "IdentityCodec",
    "DownsampleCodec",
    "ToyDenoiser",
    "RemoteDenoiser",
    "DenoiserError",
    "ProtocolError",
    "KeyframeCache",
    "add_noise",
    "sds_weight",
    "sds_loss",
    "nearest_keyframe",
    "encode_array",
    "decode_array",
    "PROTOCOL_VERSION",
]

PROTOCOL_VERSION = 1


class DenoiserError(RuntimeError):
    """A denoiser call failed (network, timeout, bad reply)."""


class ProtocolError(DenoiserError):
    """The remote peer violated the wire protocol."""


class NoiseSchedule:
    """Cumulative signal fraction from a scaled-linear variance schedule.

    ``alpha_bar(i)`` linearly interpolates the cumulative product of
    ``1 - beta_step`` at position ``i * (steps - 1)``.
    """

    def __init__(self, steps: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2):
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), steps) ** 2
        self.steps = steps
        self.alphas_cumprod = np.cumprod(1.0 - betas)

    def alpha_bar(self, i: float) -> float:
        if not 0.0 <= i <= 1.0:
            raise ValueError("timestep must lie in [0, 1]")
        pos = i * (self.steps - 1)
        lo = min(int(math.floor(pos)), self.steps - 2)
        w = pos - lo
        return float((1.0 - w) * self.alphas_cumprod[lo] + w * self.alphas_cumprod[lo + 1])

    def weight(self, i: float) -> float:
        """Time-dependent SDS weight ``1 - alpha_bar(i)``."""
        return 1.0 - self.alpha_bar(i)


def add_noise(z: np.ndarray, epsilon: np.ndarray, alpha_bar: float) -> np.ndarray:
    z = np.asarray(z)
    epsilon = np.asarray(epsilon)
    if z.shape != epsilon.shape:
        raise ValueError(f"latent shape {z.shape} != noise shape {epsilon.shape}")
    return math.sqrt(alpha_bar) * z + math.sqrt(1.0 - alpha_bar) * epsilon


class Denoiser(Protocol):
    def predict_epsilon(self, noisy_latent: np.ndarray, timestep: float, reference: np.ndarray,
                        delta_pose: np.ndarray) -> np.ndarray: ...


class IdentityCodec:
    """Latents are the (C, H, W) image itself."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent


class DownsampleCodec:
    """Average-pool by an integer factor; decode is nearest upsampling."""

    def __init__(self, factor: int):
        self.factor = factor

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(image[None], self.factor)[0]

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return F.interpolate(latent[None], scale_factor=self.factor, mode="nearest")[0]


class ToyDenoiser:
    """Analytic epsilon-predictor that treats ``target(reference, delta_pose, shape)`` as the clean latent.

    ``eps_hat = (z_noisy - sqrt(abar) z*) / sqrt(1 - abar)``, so the SDS
    residual is ``sqrt(abar) / sqrt(1 - abar) * (z - z*)``.
    """

    def __init__(self, target: Callable[[np.ndarray, np.ndarray, tuple], np.ndarray] | np.ndarray,
                 schedule: NoiseSchedule | None = None):
        self.target = target
        self.schedule = schedule or NoiseSchedule()

    def target_for(self, reference, delta_pose, shape) -> np.ndarray:
        if callable(self.target):
            return np.asarray(self.target(reference, delta_pose, tuple(shape)), dtype=np.float64)
        return np.asarray(self.target, dtype=np.float64)

    def predict_epsilon(self, noisy_latent, timestep, reference, delta_pose):
        z_star = self.target_for(reference, delta_pose, np.shape(noisy_latent))
        if z_star.shape != np.shape(noisy_latent):
            raise DenoiserError(f"target shape {z_star.shape} != latent shape {np.shape(noisy_latent)}")
        abar = self.schedule.alpha_bar(timestep)
        return (np.asarray(noisy_latent) - math.sqrt(abar) * z_star) / math.sqrt(max(1.0 - abar, 1e-6))


def sds_weight(schedule: NoiseSchedule, i: float, origin_ref, origin_virt) -> float:
    """View-modulated weight ``w(i) * (exp(angle / pi) - 1)``."""
    return schedule.weight(i) * (math.exp(angular_distance(origin_ref, origin_virt)) - 1.0)


@dataclass
class SDSResult:
    loss: torch.Tensor
    grad: np.ndarray  # weighted epsilon residual applied to the latent
    weight: float
    timestep: float


def sds_loss(
    image: torch.Tensor,
    codec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    i: float,
    reference: np.ndarray,
    delta_pose: np.ndarray,
    weight: float,
    epsilon: np.ndarray,
) -> SDSResult:
    """Reparameterized SDS loss ``|| sg(z - grad) - z ||^2``.

    Its gradient with respect to anything upstream of ``image`` is
    ``2 * grad * dz/dtheta``; the factor 2 is left in.
    """
    z = codec.encode(image)
    z_np = z.detach().numpy()
    abar = schedule.alpha_bar(i)
    if weight == 0.0:
        grad = np.zeros_like(z_np)
    else:
        noisy = add_noise(z_np, epsilon, abar)
        eps_hat = np.asarray(denoiser.predict_epsilon(noisy, i, reference, delta_pose), dtype=np.float64)
        if eps_hat.shape != z_np.shape:
            raise ProtocolError(f"denoiser returned shape {eps_hat.shape}, expected {z_np.shape}")
        grad = weight * (eps_hat - epsilon)
    target = (z.detach() - torch.from_numpy(grad).to(z.dtype))
    loss = ((target - z) ** 2).sum()
    return SDSResult(loss, grad, weight, i)


def nearest_keyframe(t: int, keyframes) -> int:
    """Closest keyframe index, ties resolved toward the earlier one."""
    keys = sorted(keyframes)
    if not keys:
        raise ValueError("no keyframes")
    return min(keys, key=lambda k: (abs(t - k), k))


@dataclass
class KeyframeCache:
    """Reference images (and their latents) for every ``interval``-th frame."""

    interval: int
    images: dict = field(default_factory=dict)
    latents: dict = field(default_factory=dict)
    encode_count: int = 0

    @classmethod
    def build(cls, images_by_frame: Callable[[int], np.ndarray], n_frames: int, interval: int = 10,
              codec=None) -> "KeyframeCache":
        codec = codec or IdentityCodec()
        cache = cls(interval)
        for k in range(0, n_frames, interval):
            img = np.asarray(images_by_frame(k), dtype=np.float64)
            cache.images[k] = img
            cache.latents[k] = codec.encode(torch.from_numpy(img)).numpy()
            cache.encode_count += 1
        return cache

    @property
    def keyframes(self) -> list[int]:
        return sorted(self.images)

    def nearest(self, t: int) -> int:
        return nearest_keyframe(t, self.images)


# -- wire protocol -----------------------------------------------------


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    try:
        shape = [int(s) for s in obj["shape"]]
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed array: {exc}") from None
    if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise ProtocolError("array payload does not match its shape")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


class RemoteDenoiser:
    """Client for ``POST /v1/denoise``; every failure surfaces as :class:`DenoiserError`."""

    def __init__(self, endpoint: str, timeout: float = 30.0, guidance: float = 5.0):
        self.url = endpoint.rstrip("/") + "/v1/denoise"
        self.timeout = timeout
        self.guidance = guidance

    def predict_epsilon(self, noisy_latent, timestep, reference, delta_pose):
        latent = np.asarray(noisy_latent)
        body = {
            "version": PROTOCOL_VERSION,
            "latent": encode_array(latent),
            "timestep": float(timestep),
            "reference": encode_array(np.asarray(reference)),
            "delta_pose": [float(v) for v in np.asarray(delta_pose).reshape(3)],
            "guidance": float(self.guidance),
        }
        req = urllib.request.Request(
            self.url, data=json.dumps(body).encode(), headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            raise DenoiserError(f"denoiser returned HTTP {exc.code}") from None
        except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
            raise DenoiserError(f"denoiser request failed: {exc}") from None
        try:
            reply = json.loads(payload)
        except ValueError:
            raise ProtocolError("reply is not JSON") from None
        if not isinstance(reply, dict) or "epsilon" not in reply:
            raise ProtocolError("reply has no epsilon")
        if reply.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version {reply.get('version')} != {PROTOCOL_VERSION}")
        eps = decode_array(reply["epsilon"])
        if eps.shape != latent.shape:
            raise ProtocolError(f"reply shape {eps.shape} != latent shape {latent.shape}")
        return eps
