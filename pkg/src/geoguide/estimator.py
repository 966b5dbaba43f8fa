"""scikit-learn style classifier wrapping featurizer + gated decoder."""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .decoder import DecoderConfig, GuideDecoder, TokenStream, anchor_input, cross_entropy
from .optim import OptimizerState, adam_step, lr_at
from .streams import FeatureBatch, GuideFeaturizer
from .tasks import VOCAB_SIZE


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def _check_features(X, featurizer):
    if isinstance(X, FeatureBatch):
        return X
    X = list(X)
    if not X:
        raise ValueError("empty input")
    return featurizer.transform(X)


class GuideClassifier(BaseEstimator, ClassifierMixin):
    """Answers spatial questions about scenes from visual + geometric tokens.

    ``fit`` takes task instances (or a precomputed :class:`FeatureBatch`
    with questions) and integer labels. ``callback(step, record)`` is called
    after every optimizer step with loss, batch accuracy, lr and the gate
    openings; returning ``False`` stops training.
    """

    def __init__(self, K=24, m=6, P_v=8, P_g=14, C_geo=16, C_llm=32, L_dec=12, heads=4, ffn=64,
                 gating="sem+glo", gate_granularity="channel", n_answers=3, steps=2000, batch=32,
                 peak_lr=3e-4, warmup_ratio=0.03, trainable=("macro", "projectors", "gates", "decoder"),
                 init_alpha=0.0, seed=0):
        self.K = K
        self.m = m
        self.P_v = P_v
        self.P_g = P_g
        self.C_geo = C_geo
        self.C_llm = C_llm
        self.L_dec = L_dec
        self.heads = heads
        self.ffn = ffn
        self.gating = gating
        self.gate_granularity = gate_granularity
        self.n_answers = n_answers
        self.steps = steps
        self.batch = batch
        self.peak_lr = peak_lr
        self.warmup_ratio = warmup_ratio
        self.trainable = trainable
        self.init_alpha = init_alpha
        self.seed = seed

    # ----------------------------------------------------------- building

    def decoder_config(self, max_len=None):
        return DecoderConfig(num_layers=self.L_dec, heads=self.heads, C_llm=self.C_llm, ffn=self.ffn,
                             m=self.m, gating=self.gating, gate_granularity=self.gate_granularity,
                             vocab_size=VOCAB_SIZE, n_answers=self.n_answers,
                             max_len=max_len or 64, trainable=tuple(self.trainable))

    def _build(self, max_len):
        self.featurizer_ = GuideFeaturizer(self.P_v, self.P_g, self.K, self.C_geo, self.C_llm,
                                           self.m, self.seed).fit()
        self.schedule_ = self.featurizer_.schedule_
        self.decoder_ = GuideDecoder(self.decoder_config(max_len), self.C_geo, seed=self.seed)
        for g in self.decoder_.gates.layers:
            g.alpha.data[:] = self.init_alpha
        self.classes_ = np.arange(self.n_answers)
        return self

    def initialize(self, X):
        """Build the model for inputs shaped like ``X`` without training."""
        feats = _check_features(X, GuideFeaturizer(self.P_v, self.P_g, self.K, self.C_geo,
                                                   self.C_llm, self.m, self.seed).fit())
        self._build(feats.n_visual + feats.questions.shape[1])
        return feats

    # ------------------------------------------------------------ forward

    def _macro(self, feats):
        dec = self.decoder_
        proj = dec.macro_projector
        if any(p.requires_grad for p in proj.parameters()):
            return proj(ag.constant(feats.macro))
        with ag.no_grad():
            return ag.constant(proj(ag.constant(feats.macro)).data)

    def fused_input(self, feats):
        stream = TokenStream(ag.constant(feats.visual), self.decoder_.embed_text(feats.questions),
                             feats.provenance)
        return anchor_input(stream, self._macro(feats))

    def logits(self, feats, return_hidden=False):
        projected = self.decoder_.project(feats.sampled)
        return self.decoder_.forward(self.fused_input(feats), projected, feats.n_visual,
                                     return_hidden=return_hidden)

    def loss(self, feats, y):
        return cross_entropy(self.logits(feats), y)

    # ----------------------------------------------------------- sklearn

    def fit(self, X, y, callback=None):
        feats = self.initialize(X)
        y = np.asarray(y, dtype=int)
        if len(y) != len(feats):
            raise ValueError(f"X has {len(feats)} samples but y has {len(y)}")
        if y.min() < 0 or y.max() >= self.n_answers:
            raise ValueError(f"labels must lie in 0..{self.n_answers - 1}")
        self.state_ = OptimizerState(self.peak_lr, self.warmup_ratio, self.steps)
        params = self.decoder_.trainable_parameters()
        rng = np.random.default_rng([self.seed, 0xB47])
        # step s reports the model after s updates; the last pass only measures
        for step in range(self.steps + 1):
            idx = rng.choice(len(y), size=min(self.batch, len(y)), replace=False)
            batch = feats.take(idx)
            final = step == self.steps
            ag.zero_grad(p for _, p in params)
            if final:
                with ag.no_grad():
                    logits = self.logits(batch)
                    loss = cross_entropy(logits, y[idx])
            else:
                logits = self.logits(batch)
                loss = cross_entropy(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            record = {"step": step, "loss": value,
                      "train_acc": float(np.mean(logits.data.argmax(axis=1) == y[idx])),
                      "lr": lr_at(step, self.state_), "gate_open": self.gate_openings().tolist()}
            # callbacks see the same parameters the record describes
            if callback is not None and callback(step, record) is False:
                break
            if not final:
                ag.backward(loss)
                adam_step(params, self.state_)
        ag.zero_grad(p for _, p in params)
        return self

    def gate_openings(self):
        """|tanh(alpha_l)| per injected layer."""
        check_is_fitted(self, "decoder_")
        return np.abs(np.tanh(self.decoder_.gates.alphas()))

    def decision_function(self, X):
        check_is_fitted(self, "decoder_")
        feats = _check_features(X, self.featurizer_)
        out = []
        with ag.no_grad():
            for lo in range(0, len(feats), 256):
                out.append(self.logits(feats.take(np.arange(lo, min(lo + 256, len(feats))))).data)
        return np.concatenate(out)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def transform_features(self, X):
        check_is_fitted(self, "featurizer_")
        return _check_features(X, self.featurizer_)
