"""Small seeded end-to-end problems for gradient and identity checks."""

from dataclasses import dataclass

import numpy as np

from .estimator import GuideClassifier
from .scene import SceneConfig, generate_scene
from .streams import GuideFeaturizer
from .tasks import TOKENS


@dataclass
class ToyProblem:
    model: GuideClassifier
    features: object
    labels: np.ndarray

    def logits(self):
        return self.model.logits(self.features)

    def loss(self):
        return self.model.loss(self.features, self.labels)

    def trainable(self):
        return self.model.decoder_.trainable_parameters()


def toy_features(N=2, merged=(2, 2), batch=2, K=8, C_geo=4, C_llm=8, m=2, P_v=8, P_g=14, seed=0):
    """Real pipeline features for ``batch`` random scenes with a merged grid of ``merged``."""
    H, W = 2 * merged[0] * P_v, 2 * merged[1] * P_v
    cfg = SceneConfig(N=N, H=max(H, 32), W=max(W, 32), num_objects=2)
    scenes = [generate_scene(cfg, 1000 * seed + i) for i in range(batch)]
    if (cfg.H, cfg.W) != (H, W):
        for s in scenes:
            s.frames, s.depth = s.frames[:, :H, :W], s.depth[:, :H, :W]
    feats = GuideFeaturizer(P_v, P_g, K, C_geo, C_llm, m, seed).fit().transform(scenes)
    q = [TOKENS["nearer_of_two"], TOKENS["MARK_A"], TOKENS["MARK_B"], TOKENS["ANS"]]
    feats.questions = np.array([q] * batch)
    return feats


def toy_problem(m=2, N=2, merged=(2, 2), batch=2, L_dec=2, K=8, C_geo=4, C_llm=8, heads=2, ffn=16,
                gating="sem+glo", gate_granularity="channel", alpha=None,
                trainable=("macro", "projectors", "gates", "decoder"), seed=0):
    """A built but untrained model on a fixed toy batch.

    ``alpha`` of ``None`` keeps the zero initialisation; a float sets every
    gate scalar; ``"random"`` draws them from N(0, 0.5) so every parameter
    group gets a nonzero gradient.
    """
    feats = toy_features(N, merged, batch, K, C_geo, C_llm, m, seed=seed)
    model = GuideClassifier(K=K, m=m, C_geo=C_geo, C_llm=C_llm, L_dec=L_dec, heads=heads, ffn=ffn,
                            gating=gating, gate_granularity=gate_granularity, trainable=trainable, seed=seed)
    model.initialize(feats)
    gates = model.decoder_.gates.layers
    if isinstance(alpha, str) and alpha == "random":
        rng = np.random.default_rng([seed, 0xA1F])
        for g in gates:
            g.alpha.data[:] = rng.normal(0.0, 0.5)
    elif alpha is not None:
        for g in gates:
            g.alpha.data[:] = alpha
    labels = np.arange(batch) % model.n_answers
    return ToyProblem(model, feats, labels)


def full_gradient_check(seed=0, epsilon=1e-5, tolerance=1e-5, **kw):
    """Finite-difference check of every trainable parameter of a toy model.

    The check runs at a generic point rather than at init: gate scalars are
    random, biases are jittered off zero and the answer head is redrawn at
    unit gain. At init the loss is flat to ~1e-7 in most directions, which
    puts central differences on the float64 round-off floor, and zero biases
    can leave relu inputs exactly on the kink.
    """
    from .gradcheck import finite_difference_check

    kw.setdefault("alpha", "random")
    prob = toy_problem(seed=seed, **kw)
    head = prob.model.decoder_.head.weight
    rng = np.random.default_rng([seed, 0x4EAD])
    head.data = rng.normal(0.0, 1.0 / np.sqrt(head.shape[0]), size=head.shape)
    named = prob.trainable()
    for name, p in named:
        if name.endswith("bias") or name.endswith("beta"):
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    return finite_difference_check(prob.loss, [p for _, p in named], epsilon, tolerance,
                                   names=[n for n, _ in named])
