"""Deterministic stand-in for a feed-forward geometry encoder, and the layer sampler."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .alignment import patchify

DEPTH_CHANNEL = 0


class ResolutionError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class FeatureStack:
    """Per-layer maps ``f^1 .. f^K``; ``layers[k - 1]`` holds ``f^k``."""

    layers: list
    grid: tuple
    channels: int

    @property
    def K(self):
        return len(self.layers)

    def layer(self, k):
        if not 1 <= k <= self.K:
            raise IndexError(f"layer index {k} outside 1..{self.K}")
        return self.layers[k - 1]


@dataclass
class InjectionSchedule:
    sampled: list
    anchor: int
    adjusted: bool = False
    decoder_targets: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.sampled)

    def to_dict(self):
        return {"sampled": list(self.sampled), "anchor": self.anchor, "m": self.m,
                "decoder_targets": {str(k): v for k, v in self.decoder_targets.items()}}


def sample_layers(K, m):
    """Pick ``m`` encoder layers past the shallow quarter, deepest at ``K - 1``.

    ``k_j = floor(K/4) + j*s - 1`` with ``s = floor((K - floor(K/4)) / m)``.
    When ``s == 1`` that progression would start on layer ``floor(K/4)``
    itself, so it is shifted up by one (``k_j = floor(K/4) + j``) and the
    schedule is flagged ``adjusted``.
    """
    if K < 8:
        raise ScheduleError(f"K must be >= 8, got {K}")
    q = K // 4
    if m == 0:
        return InjectionSchedule([], K)
    if not 1 <= m <= K - q - 1:
        raise ScheduleError(f"m must be in 0..{K - q - 1} for K={K}, got {m}")
    s = (K - q) // m
    sampled = [q + j * s - 1 for j in range(1, m + 1)]
    adjusted = False
    if sampled[0] <= q:
        sampled = [q + j for j in range(1, m + 1)]
        adjusted = True
        warnings.warn(f"sample_layers(K={K}, m={m}): stride 1, schedule shifted to {sampled}",
                      stacklevel=2)
    if sampled[-1] > K - 1:
        sampled = sorted({min(k, K - 1) for k in sampled})
        adjusted = True
        warnings.warn(f"sample_layers(K={K}, m={m}): clipped to {sampled}", stacklevel=2)
    targets = {j + 1: k for j, k in enumerate(sampled)}
    return InjectionSchedule(sampled, K, adjusted, targets)


class MockGeometryEncoder:
    """Seeded random patch embedding followed by ``K`` relu layers with cross-frame mixing.

    Layer ``k`` mixes each frame with the mean over frames using weight
    ``(k - 1) / (K - 1)``: layer 1 is purely per-frame, layer ``K`` is fully
    shared across frames.

    Depth is exposed as a read-out slot: channel :data:`DEPTH_CHANNEL` of
    every emitted layer ``1..K-1`` holds the patch-mean depth, but the slot is
    not fed into the next layer, and the terminal layer (reserved for input
    anchoring) carries no depth. Everything the encoder computes from pixels
    alone stays a function of RGB, so depth reaches a decoder only through
    the injected layers.
    """

    def __init__(self, K=24, C_geo=16, P_g=14, seed=0):
        if K < 2:
            raise ValueError("K must be >= 2")
        if C_geo < 2:
            raise ValueError("C_geo must leave room beyond the depth channel")
        self.K, self.C_geo, self.P_g, self.seed = K, C_geo, P_g, seed
        rng = np.random.default_rng([seed, 0x6E0])
        d_patch = P_g * P_g * 3
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, C_geo))
        self.weights = [rng.normal(0.0, np.sqrt(2.0 / C_geo), size=(C_geo, C_geo)) for _ in range(K)]

    def mixing_weight(self, k):
        return (k - 1) / (self.K - 1)

    def plants_depth(self, k):
        return k < self.K

    def embed_patches(self, frames):
        """Layer 0: the fixed patch projection."""
        return patchify(np.asarray(frames, dtype=np.float64) - 0.5, self.P_g) @ self.embed

    def layer_step(self, k, x):
        """Hidden state after layer ``k`` (without the depth read-out)."""
        x = np.maximum(x @ self.weights[k - 1], 0.0)
        # per-token rms normalisation keeps the stack's scale fixed across depth
        x = x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)
        w = self.mixing_weight(k)
        if w > 0:
            x = (1.0 - w) * x + w * x.mean(axis=0, keepdims=True)
        return x

    def readout(self, k, x, depth_patches):
        if not self.plants_depth(k):
            return x
        x = x.copy()
        x[..., DEPTH_CHANNEL] = depth_patches
        return x

    def check_resolution(self, H, W):
        P = self.P_g
        if H % P or W % P:
            raise ResolutionError(
                f"{H}x{W} not divisible by P_g={P}; resize to {(H // P) * P}x{(W // P) * P} "
                f"(or use plan_alignment for the grid-matched size)")

    def hidden_states(self, frames):
        """``[h^0, ..., h^K]``: the pixel-only states that feed each layer."""
        frames = np.asarray(frames, dtype=np.float64)
        self.check_resolution(*frames.shape[1:3])
        states = [self.embed_patches(frames)]
        for k in range(1, self.K + 1):
            states.append(self.layer_step(k, states[-1]))
        return states

    def encode(self, frames, depth):
        frames = np.asarray(frames, dtype=np.float64)
        N, H, W, _ = frames.shape
        states = self.hidden_states(frames)
        depth_patches = patchify(np.asarray(depth, dtype=np.float64)[..., None], self.P_g).mean(axis=-1)
        layers = [self.readout(k, states[k], depth_patches) for k in range(1, self.K + 1)]
        return FeatureStack(layers, (H // self.P_g, W // self.P_g), self.C_geo)


def encode(scene, params, seed=0):
    """Functional form: ``params`` carries ``K``, ``C_geo`` and ``P_g``."""
    enc = MockGeometryEncoder(params["K"], params["C_geo"], params["P_g"], seed)
    return enc.encode(scene.frames, scene.depth)


def cross_frame_dependence(encoder, frames, depth=None, rng=None, scale=0.1):
    """Per-layer cross-frame response.

    For each layer ``k`` the state entering it is perturbed on frames
    ``1..N-1`` only, and the score is ``|delta f_0| / |delta f_rest|`` at the
    layer's output; 0 means frame 0 does not see the other frames at all.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise ValueError("need at least two frames")
    states = encoder.hidden_states(frames)
    scores = []
    for k in range(1, encoder.K + 1):
        bumped = states[k - 1].copy()
        bumped[1:] += rng.normal(0.0, scale, size=bumped[1:].shape)
        a = states[k]
        b = encoder.layer_step(k, bumped)
        d0 = np.linalg.norm(a[0] - b[0])
        drest = np.linalg.norm(a[1:] - b[1:])
        scores.append(0.0 if drest == 0 else float(d0 / drest))
    return scores
