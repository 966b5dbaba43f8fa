"""Synthetic multi-frame scenes of flat rectangles with ground-truth depth."""

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SceneConfig:
    N: int = 2
    H: int = 64
    W: int = 64
    num_objects: int = 2
    depth_range: tuple = (1.0, 5.0)
    max_shift: int = 4
    allow_overlap: bool = True
    min_size: float = 0.25   # object extent as a fraction of the image side
    max_size: float = 0.5

    def validate(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.H < 32 or self.W < 32:
            raise ValueError(f"H and W must be >= 32, got {self.H}x{self.W}")
        if self.num_objects < 1:
            raise ValueError("num_objects must be >= 1")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValueError(f"depth_range must satisfy 0 < min < max, got {self.depth_range}")


@dataclass
class SceneObject:
    top: int
    left: int
    height: int
    width: int
    depth: float
    color: tuple


@dataclass
class SyntheticScene:
    frames: np.ndarray        # (N, H, W, 3) in [0, 1]
    depth: np.ndarray         # (N, H, W) metres
    objects: list
    shifts: np.ndarray        # (N, 2) per-frame (dy, dx) camera pan in pixels
    seed: int
    object_marks: list = field(default_factory=list)  # (frame, row, col, object_id)

    @property
    def N(self):
        return self.frames.shape[0]

    @property
    def H(self):
        return self.frames.shape[1]

    @property
    def W(self):
        return self.frames.shape[2]

    def copy(self):
        return SyntheticScene(self.frames.copy(), self.depth.copy(), list(self.objects),
                              self.shifts.copy(), self.seed, list(self.object_marks))


def _object_mask(obj, shift, H, W):
    mask = np.zeros((H, W), dtype=bool)
    t, l = obj.top + shift[0], obj.left + shift[1]
    mask[max(t, 0):max(min(t + obj.height, H), 0), max(l, 0):max(min(l + obj.width, W), 0)] = True
    return mask


def render(objects, shifts, H, W, background_color, background_depth):
    """Paint objects far-to-near so nearer surfaces overwrite farther ones."""
    N = len(shifts)
    frames = np.empty((N, H, W, 3))
    depth = np.empty((N, H, W))
    frames[:] = background_color
    depth[:] = background_depth
    order = sorted(range(len(objects)), key=lambda i: -objects[i].depth)
    for n in range(N):
        for i in order:
            m = _object_mask(objects[i], shifts[n], H, W)
            frames[n][m] = objects[i].color
            depth[n][m] = objects[i].depth
    return frames, depth


def _box_hits(integral, tops, lefts, h, w):
    """For every candidate top-left, whether an h x w box touches the occupied area.

    ``integral`` is the zero-padded 2-D cumulative sum of the occupancy mask.
    """
    t, l = tops[:, None], lefts[None, :]
    total = integral[t + h, l + w] - integral[t, l + w] - integral[t + h, l] + integral[t, l]
    return total > 0


def _covers_cell(starts, extent, cell):
    """Whether ``[start, start + extent)`` contains a whole cell-aligned interval."""
    first = -(-starts // cell) * cell
    return first + cell <= starts + extent


def generate_scene(config: SceneConfig, seed: int, depths=None, mark_cell=None):
    """Build a seeded scene; ``depths`` optionally pins per-object depths.

    With ``mark_cell`` set, each object gets at most one mark: a frame-0 cell of
    that pixel size showing only that object.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    N, H, W = config.N, config.H, config.W
    lo, hi = (float(v) for v in config.depth_range)
    k = config.num_objects
    if depths is None:
        # objects strictly in front of the far wall at ``hi``
        depths = rng.uniform(lo, lo + 0.8 * (hi - lo), size=k)
    depths = [float(d) for d in depths]
    if len(depths) != k or any(not (lo <= d <= hi) for d in depths):
        raise ValueError(f"depths must be {k} values inside {config.depth_range}")

    step = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
    shifts = np.array([step * n for n in range(N)], dtype=int)
    span_y = int(np.abs(shifts[:, 0]).max())
    span_x = int(np.abs(shifts[:, 1]).max())

    occupied = np.zeros((H, W), dtype=bool)
    objects = []
    for i in range(k):
        integral = np.zeros((H + 1, W + 1), dtype=np.int64)
        integral[1:, 1:] = occupied.cumsum(0).cumsum(1)
        for _ in range(50):
            h = int(rng.integers(int(H * config.min_size), int(H * config.max_size) + 1))
            w = int(rng.integers(int(W * config.min_size), int(W * config.max_size) + 1))
            # keep the object inside the image for every frame of the pan
            tops = np.arange(span_y, H - h - span_y + 1)
            lefts = np.arange(span_x, W - w - span_x + 1)
            if not len(tops) or not len(lefts):
                continue
            ok = np.ones((len(tops), len(lefts)), dtype=bool)
            if not config.allow_overlap:
                ok &= ~_box_hits(integral, tops, lefts, h, w)
            if mark_cell:
                ok &= _covers_cell(tops, h, mark_cell)[:, None] & _covers_cell(lefts, w, mark_cell)[None, :]
            if ok.any():
                choice = rng.choice(np.flatnonzero(ok))
                top, left = int(tops[choice // len(lefts)]), int(lefts[choice % len(lefts)])
                break
        else:
            raise ValueError("could not place objects; lower num_objects or object size")
        objects.append(SceneObject(top, left, h, w, depths[i],
                                   tuple(float(c) for c in rng.uniform(0.15, 0.85, size=3))))
        # reserve a 2-pixel margin around the box
        occupied[max(top - 2, 0):top + h + 2, max(left - 2, 0):left + w + 2] = True

    background = tuple(float(c) for c in rng.uniform(0.15, 0.85, size=3))
    frames, depth = render(objects, shifts, H, W, background, hi)
    scene = SyntheticScene(frames, depth, objects, shifts, int(seed))
    if mark_cell:
        scene.object_marks = find_marks(scene, mark_cell, rng)
    return scene


def find_marks(scene, cell, rng=None):
    """Pick one frame-0 grid cell per object that shows nothing but that object."""
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    H, W = scene.H, scene.W
    marks = []
    for i, obj in enumerate(scene.objects):
        ok = []
        for r in range(H // cell):
            for c in range(W // cell):
                win = (slice(r * cell, (r + 1) * cell), slice(c * cell, (c + 1) * cell))
                if (np.all(scene.depth[0][win] == obj.depth)
                        and np.all(_object_mask(obj, scene.shifts[0], H, W)[win])):
                    ok.append((r, c))
        if ok:
            r, c = ok[int(rng.integers(len(ok)))]
            marks.append((0, r, c, i))
    return marks


def brute_force_depth(objects, shifts, H, W, background_depth):
    """Per-pixel minimum over every object covering that pixel."""
    N = len(shifts)
    out = np.full((N, H, W), float(background_depth))
    for n in range(N):
        for y in range(H):
            for x in range(W):
                for obj in objects:
                    t, l = obj.top + shifts[n][0], obj.left + shifts[n][1]
                    if t <= y < t + obj.height and l <= x < l + obj.width:
                        out[n, y, x] = min(out[n, y, x], obj.depth)
    return out


# ------------------------------------------------------------------ dumps
# "GGS1", u32 N, H, W, then N*H*W*3 f64 frames, then N*H*W f64 depth (LE).

def dump_scene(scene, path):
    with open(path, "wb") as fh:
        fh.write(b"GGS1")
        fh.write(struct.pack("<3I", scene.N, scene.H, scene.W))
        fh.write(np.ascontiguousarray(scene.frames, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(scene.depth, dtype="<f8").tobytes())


def load_scene_dump(path):
    """Returns ``(frames, depth)`` arrays from a :func:`dump_scene` file."""
    with open(path, "rb") as fh:
        if fh.read(4) != b"GGS1":
            raise ValueError(f"{path}: not a scene dump")
        N, H, W = struct.unpack("<3I", fh.read(12))
        frames = np.frombuffer(fh.read(8 * N * H * W * 3), dtype="<f8").reshape(N, H, W, 3)
        depth = np.frombuffer(fh.read(8 * N * H * W), dtype="<f8").reshape(N, H, W)
    return frames.astype(np.float64), depth.astype(np.float64)
