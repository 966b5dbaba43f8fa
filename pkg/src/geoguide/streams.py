"""Frozen front end: scenes -> aligned visual tokens and merged geometric blocks."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autograd as ag
from .alignment import MergeProjector, concat_2x2, patchify, plan_alignment, resize_frames
from .encoder import MockGeometryEncoder, sample_layers


@dataclass
class FeatureBatch:
    """Per-instance arrays, stacked along axis 0.

    visual: ``(B, T, C_llm)`` frozen visual tokens.
    macro: ``(B, T, 4*C_geo)`` 2x2-concatenated terminal geometric layer.
    sampled: ``m`` arrays ``(B, T, 4*C_geo)``, shallowest sampled layer first.
    provenance: ``(T, 3)`` (frame, row, col) of each visual token.
    """

    visual: np.ndarray
    macro: np.ndarray
    sampled: list
    provenance: np.ndarray
    questions: np.ndarray = None

    def __len__(self):
        return self.visual.shape[0]

    @property
    def n_visual(self):
        return self.visual.shape[1]

    def take(self, idx):
        q = None if self.questions is None else self.questions[idx]
        return FeatureBatch(self.visual[idx], self.macro[idx], [s[idx] for s in self.sampled],
                            self.provenance, q)


def token_provenance(N, grid):
    gh, gw = grid
    f, r, c = np.meshgrid(np.arange(N), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([f.ravel(), r.ravel(), c.ravel()], axis=1)


class GuideFeaturizer(BaseEstimator, TransformerMixin):
    """Runs the frozen visual stream and the mock geometry encoder on scenes.

    ``transform`` accepts scenes or task instances (anything with ``.scene``)
    and returns a :class:`FeatureBatch`. Nothing here is trained; ``fit``
    only instantiates the seeded random components.
    """

    def __init__(self, P_v=8, P_g=14, K=24, C_geo=16, C_llm=32, m=6, seed=0):
        self.P_v = P_v
        self.P_g = P_g
        self.K = K
        self.C_geo = C_geo
        self.C_llm = C_llm
        self.m = m
        self.seed = seed

    def fit(self, X=None, y=None):
        self.schedule_ = sample_layers(self.K, self.m)
        self.encoder_ = MockGeometryEncoder(self.K, self.C_geo, self.P_g, self.seed)
        rng = np.random.default_rng([self.seed, 0x515])
        d_patch = self.P_v * self.P_v * 3
        self.visual_embed_ = rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, self.C_geo)) * 4.0
        self.visual_connector_ = MergeProjector(self.C_geo, self.C_llm, rng=rng, name="visual.connector").freeze()
        return self

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            self.fit()

    def plan(self, H, W):
        return plan_alignment(H, W, self.P_v, self.P_g)

    def encode_scene(self, scene):
        """Single scene -> (visual tokens, merged macro, list of merged sampled, plan)."""
        self._check_fitted()
        plan = self.plan(scene.H, scene.W)
        gh, gw = plan.pre_merge_grid
        frames = resize_frames(scene.frames, plan.resized)
        depth = resize_frames(scene.depth, plan.resized)
        stack = self.encoder_.encode(frames, depth)
        assert stack.grid == plan.pre_merge_grid

        vis = patchify(scene.frames[:, :gh * self.P_v, :gw * self.P_v] - 0.5, self.P_v) @ self.visual_embed_
        with ag.no_grad():
            visual = self.visual_connector_(ag.constant(concat_2x2(vis))).data
        C = self.C_llm
        flat = lambda a: a.reshape(-1, a.shape[-1])
        macro = flat(concat_2x2(stack.layer(self.schedule_.anchor)))
        sampled = [flat(concat_2x2(stack.layer(k))) for k in self.schedule_.sampled]
        return visual.reshape(-1, C), macro, sampled, plan

    def transform(self, X):
        self._check_fitted()
        vis, mac, samp, questions = [], [], [], []
        prov = None
        for item in X:
            scene = getattr(item, "scene", item)
            v, mc, s, plan = self.encode_scene(scene)
            p = token_provenance(scene.N, plan.merged_grid)
            if prov is None:
                prov = p
            elif not np.array_equal(prov, p):
                raise ValueError("all scenes in one batch must share N, H and W")
            vis.append(v)
            mac.append(mc)
            samp.append(s)
            if hasattr(item, "question"):
                questions.append(item.question)
        sampled = [np.stack([s[j] for s in samp]) for j in range(self.schedule_.m)]
        q = np.array(questions) if questions else None
        return FeatureBatch(np.stack(vis), np.stack(mac), sampled, prov, q)
