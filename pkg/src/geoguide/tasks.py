"""Synthetic spatial question families whose answers depend only on depth.

Object colours are drawn independently of depth and objects never overlap,
so neither colour nor occlusion order in the RGB frames reveals the answer.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .scene import SceneConfig, generate_scene

FAMILIES = ("nearer_of_two", "depth_order", "object_count")
N_CLASSES = {"nearer_of_two": 2, "depth_order": 3, "object_count": 3}

# toy vocabulary
TOKENS = {
    "nearer_of_two": 0,
    "depth_order": 1,
    "object_count": 2,
    "MARK_A": 3,
    "MARK_B": 4,
    "MARK_C": 5,
    "ANS": 6,
}
VOCAB_SIZE = len(TOKENS)
MARK_COLORS = ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
MARK_NAMES = ("MARK_A", "MARK_B", "MARK_C")
MIN_DEPTH_GAP = 0.5


@dataclass
class TaskInstance:
    family: str
    scene: object
    question: list
    label: int
    marks: list       # (frame, row, col, object_id) in mark-cell units, frame 0
    cell: int


def default_scene_config(family):
    if family == "nearer_of_two":
        return SceneConfig(N=2, H=64, W=64, num_objects=2, allow_overlap=False, min_size=0.3, max_size=0.42)
    return SceneConfig(N=2, H=96, W=96, num_objects=3, allow_overlap=False, min_size=0.3, max_size=0.4)


def question_for(family):
    marks = {"nearer_of_two": 2, "depth_order": 3, "object_count": 0}[family]
    return [TOKENS[family]] + [TOKENS[MARK_NAMES[i]] for i in range(marks)] + [TOKENS["ANS"]]


def _cell_depth(depth_map, mark, cell):
    _, r, c, _ = mark
    return float(depth_map[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell].mean())


def brute_force_label(family, depth, marks, cell, background_depth=None):
    """Recompute the answer from the frame-0 depth map alone."""
    d0 = np.asarray(depth)[0]
    if family == "nearer_of_two":
        a, b = (_cell_depth(d0, m, cell) for m in marks[:2])
        return 0 if a < b else 1
    if family == "depth_order":
        ds = [_cell_depth(d0, m, cell) for m in marks[:3]]
        return int(sum(d < ds[0] for d in ds[1:]))
    if family == "object_count":
        bg = d0.max() if background_depth is None else background_depth
        vals = np.unique(d0[d0 < bg])
        return len(vals) - 1
    raise ValueError(f"unknown task family {family!r}")


def _depths_for(family, label, rng, lo, hi, k):
    top = lo + 0.8 * (hi - lo)
    while True:
        if family == "object_count":
            levels = np.sort(rng.uniform(lo, top, size=label + 1))
            if label and np.diff(levels).min() < MIN_DEPTH_GAP:
                continue
            # every level used at least once, remaining objects reuse a level
            picks = list(levels) + list(rng.choice(levels, size=k - len(levels)))
            return [float(d) for d in rng.permutation(picks)]
        ds = rng.uniform(lo, top, size=k)
        if np.diff(np.sort(ds)).min() >= MIN_DEPTH_GAP:
            return [float(d) for d in ds]


def _assign_marks(family, label, depths, rng):
    """Order the object ids so that the mark sequence realises ``label``."""
    order = list(np.argsort(depths))   # nearest first
    if family == "nearer_of_two":
        return [order[0], order[1]] if label == 0 else [order[1], order[0]]
    if family == "depth_order":
        first = order[label]
        rest = [o for o in order if o != first]
        return [first] + list(rng.permutation(rest))
    return []


def make_instance(family, label, seed, scene_config=None, cell=16, max_tries=500):
    cfg = scene_config or default_scene_config(family)
    lo, hi = cfg.depth_range
    rng = np.random.default_rng(seed)
    for attempt in range(max_tries):
        depths = _depths_for(family, label, rng, lo, hi, cfg.num_objects)
        scene_seed = int(rng.integers(2**63 - 1))
        try:
            scene = generate_scene(cfg, scene_seed, depths=depths, mark_cell=cell)
        except ValueError:
            continue
        marked = {m[3]: m for m in scene.object_marks}
        ids = _assign_marks(family, label, depths, rng)
        if any(i not in marked for i in ids):
            continue
        marks = [marked[i] for i in ids]
        for mark, color in zip(marks, MARK_COLORS):
            f, r, c, _ = mark
            scene.frames[f, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = color
        scene.object_marks = marks
        inst = TaskInstance(family, scene, question_for(family), int(label), marks, cell)
        check = brute_force_label(family, scene.depth, marks, cell, background_depth=hi)
        if check != label:
            raise AssertionError(f"labeler disagreement for seed {seed}: stored {label}, brute force {check}")
        return inst
    raise RuntimeError(f"could not build a {family} instance after {max_tries} tries")


def make_task_batch(family, batch, seed, scene_config=None, cell=16):
    """Class-balanced, seeded batch of task instances."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; choose from {FAMILIES}")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n = N_CLASSES[family]
    rng = np.random.default_rng([seed, 0x7A5])
    labels = rng.permutation(np.arange(batch) % n)
    if batch < 8:
        warnings.warn(f"batch={batch} < 8: class-balance check skipped", stacklevel=2)
    else:
        counts = np.bincount(labels, minlength=n) / batch
        assert np.all(np.abs(counts - 1.0 / n) <= 0.1), counts
    return [make_instance(family, int(y), [seed, i], scene_config, cell) for i, y in enumerate(labels)]
