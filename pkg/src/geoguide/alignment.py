"""Grid alignment between the visual and geometric patch grids, plus the 2x2 merge."""

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .nn import Linear, Module


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentPlan:
    H: int
    W: int
    P_v: int
    P_g: int
    resized: tuple
    pre_merge_grid: tuple
    merged_grid: tuple

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def tokens_per_frame(self):
        return self.merged_grid[0] * self.merged_grid[1]


def plan_alignment(H, W, P_v, P_g):
    """Resize target that makes a ``P_g`` patching reproduce the ``P_v`` grid."""
    for name, v in (("H", H), ("W", W), ("P_v", P_v), ("P_g", P_g)):
        if int(v) != v or v <= 0:
            raise AlignmentError(f"{name} must be a positive integer, got {v}")
    if H < P_v or W < P_v:
        raise AlignmentError(f"image {H}x{W} is smaller than one visual patch ({P_v})")
    gh, gw = H // P_v, W // P_v
    if gh < 2 or gw < 2:
        raise AlignmentError(f"pre-merge grid {gh}x{gw} cannot be 2x2 merged")
    return AlignmentPlan(int(H), int(W), int(P_v), int(P_g),
                         (gh * P_g, gw * P_g), (gh, gw), (gh // 2, gw // 2))


def resize_bilinear(image, target):
    """Bilinear resampling with half-pixel centres (align_corners=False).

    ``image`` is ``(H, W)`` or ``(H, W, C)``; leading batch axes are not
    supported, call once per frame.
    """
    image = np.asarray(image, dtype=np.float64)
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be >= 1, got {target}")
    if image.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C), got {image.shape}")
    H, W = image.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(H, th)
    x0, x1, fx = axis(W, tw)
    if image.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_frames(frames, target):
    return np.stack([resize_bilinear(f, target) for f in frames])


def patchify(images, P):
    """``(N, H, W, C)`` -> ``(N, H//P, W//P, P*P*C)``; trailing pixels are cropped."""
    N, H, W, C = images.shape
    gh, gw = H // P, W // P
    x = images[:, :gh * P, :gw * P].reshape(N, gh, P, gw, P, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(N, gh, gw, P * P * C)


def concat_2x2(feature):
    """Channel-concatenate each 2x2 block in order TL, TR, BL, BR.

    Accepts a numpy array or DiffTensor of shape ``(N, G_h, G_w, C)``; an odd
    trailing row or column is dropped with a warning.
    """
    is_tensor = isinstance(feature, ag.DiffTensor)
    N, gh, gw, C = feature.shape
    if gh < 2 or gw < 2:
        raise AlignmentError(f"grid {gh}x{gw} is too small for a 2x2 merge")
    mh, mw = gh // 2, gw // 2
    if gh % 2 or gw % 2:
        warnings.warn(f"odd grid {gh}x{gw}: dropping trailing row/column before 2x2 merge",
                      stacklevel=2)
    if is_tensor:
        x = feature
        if gh % 2 or gw % 2:
            x = ag.slice_(x, (slice(None), slice(0, 2 * mh), slice(0, 2 * mw)))
        x = ag.reshape(x, (N, mh, 2, mw, 2, C))
        x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
        return ag.reshape(x, (N, mh, mw, 4 * C))
    x = np.asarray(feature)[:, :2 * mh, :2 * mw]
    x = x.reshape(N, mh, 2, mw, 2, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, mh, mw, 4 * C)


class MergeProjector(Module):
    """``4*C_in -> hidden -> C_llm`` MLP applied to concatenated 2x2 blocks."""

    def __init__(self, c_in, c_llm, hidden=None, rng=None, name="merge", scale=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in = c_in
        self.c_llm = c_llm
        self.hidden = hidden if hidden is not None else 2 * c_llm
        self.fc_in = Linear(4 * c_in, self.hidden, rng, f"{name}.fc_in", gain=np.sqrt(2.0))
        self.fc_out = Linear(self.hidden, c_llm, rng, f"{name}.fc_out", gain=scale)

    def __call__(self, merged):
        if merged.shape[-1] != 4 * self.c_in:
            raise AlignmentError(
                f"merge projector expects {4 * self.c_in} concatenated channels, got {merged.shape[-1]}")
        return self.fc_out(ag.relu(self.fc_in(merged)))


def merge_project(feature, projector):
    """``(N, G_h, G_w, C_in)`` -> ``(N, G_h//2, G_w//2, C_llm)``."""
    if feature.shape[-1] != projector.c_in:
        raise AlignmentError(f"feature has {feature.shape[-1]} channels, projector expects {projector.c_in}")
    x = feature if isinstance(feature, ag.DiffTensor) else ag.constant(feature)
    return projector(concat_2x2(x))
