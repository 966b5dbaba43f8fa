"""Toy prefix decoder with input anchoring, layer-wise injection and dual gating."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .alignment import MergeProjector
from .nn import LayerNorm, Linear, Module, param

GATING_MODES = ("none", "sem", "sem+glo")
MASK_VALUE = -1e9


class ProvenanceError(ValueError):
    pass


@dataclass
class DecoderConfig:
    num_layers: int = 12
    heads: int = 4
    C_llm: int = 32
    ffn: int = 64
    m: int = 6
    gating: str = "sem+glo"
    gate_granularity: str = "channel"   # or "token": one gate value per visual token
    gate_hidden: int = None             # defaults to C_llm // 2
    vocab_size: int = 7
    n_answers: int = 3
    max_len: int = 64
    trainable: tuple = ("macro", "projectors", "gates", "decoder")

    def __post_init__(self):
        if self.gate_hidden is None:
            self.gate_hidden = max(1, self.C_llm // 2)
        self.trainable = tuple(self.trainable)

    def validate(self):
        if not 0 <= self.m <= self.num_layers:
            raise ValueError(f"m={self.m} must lie in 0..num_layers={self.num_layers}")
        if self.heads < 1 or self.C_llm % self.heads:
            raise ValueError(f"heads={self.heads} must divide C_llm={self.C_llm}")
        if self.gating not in GATING_MODES:
            raise ValueError(f"gating must be one of {GATING_MODES}, got {self.gating!r}")
        if self.gate_granularity not in ("channel", "token"):
            raise ValueError("gate_granularity must be 'channel' or 'token'")
        unknown = set(self.trainable) - {"projectors", "gates", "decoder", "macro", "embeddings"}
        if unknown:
            raise ValueError(f"unknown trainable groups {sorted(unknown)}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d


@dataclass
class TokenStream:
    """Visual tokens followed by text tokens, both already at width ``C_llm``.

    ``visual`` is ``(B, T, C)`` and ``text`` is ``(B, L, C)``; ``provenance``
    gives ``(frame, row, col)`` for each of the ``T`` visual positions.
    """

    visual: object
    text: object
    provenance: np.ndarray = None

    @property
    def n_visual(self):
        return self.visual.shape[-2]

    @property
    def visual_mask(self):
        n = self.n_visual + self.text.shape[-2]
        mask = np.zeros(n, dtype=bool)
        mask[:self.n_visual] = True
        return mask


def _wrap(x):
    return x if isinstance(x, ag.DiffTensor) else ag.constant(x)


def _tokens(x, lo, hi):
    """Slice along the token axis (second to last)."""
    return ag.slice_(x, (slice(None),) * (x.data.ndim - 2) + (slice(lo, hi),))


def anchor_input(stream: TokenStream, f_macro):
    """Add the projected terminal geometry to the visual positions only.

    Returns the fused ``(B, T + L, C)`` sequence.
    """
    visual, text, f_macro = _wrap(stream.visual), _wrap(stream.text), _wrap(f_macro)
    if f_macro.shape != visual.shape:
        raise ValueError(f"anchor: macro feature {f_macro.shape} does not match visual tokens {visual.shape}")
    if text.shape[:-2] != visual.shape[:-2] or text.shape[-1] != visual.shape[-1]:
        raise ValueError(f"anchor: text {text.shape} incompatible with visual {visual.shape}")
    return ag.concat([ag.add(visual, f_macro), text], axis=-2)


class GateLayer(Module):
    def __init__(self, c_llm, hidden, rng, name, per_token=False):
        self.fc1 = Linear(c_llm, hidden, rng, f"{name}.sem.fc1", gain=np.sqrt(2.0))
        self.fc2 = Linear(hidden, 1 if per_token else c_llm, rng, f"{name}.sem.fc2", gain=0.5)
        self.alpha = param(np.zeros(1), f"{name}.alpha")
        self.per_token = per_token
        self.c_llm = c_llm


class GateBank(Module):
    """Semantic-gate MLPs and global scalars for decoder layers ``1..m``."""

    def __init__(self, m, c_llm, hidden, rng, per_token=False):
        self.layers = [GateLayer(c_llm, hidden, rng, f"gates.{l}", per_token) for l in range(1, m + 1)]

    @property
    def m(self):
        return len(self.layers)

    def layer(self, l):
        if not 1 <= l <= self.m:
            raise IndexError(f"decoder layer {l} is outside the injection schedule 1..{self.m}")
        return self.layers[l - 1]

    def alphas(self):
        return np.array([g.alpha.item() for g in self.layers])


def semantic_gate(h_visual, layer, gates):
    """sigmoid(MLP(h)) per token and channel, computed from the raw hidden state."""
    g = gates.layer(layer)
    h = _wrap(h_visual)
    out = ag.sigmoid(g.fc2(ag.relu(g.fc1(h))))
    if g.per_token:
        out = ag.matmul(out, ag.constant(np.ones((1, g.c_llm))))
    return out


def global_gate(layer, gates):
    return ag.tanh(gates.layer(layer).alpha)


def inject(h, g, layer, gates, mode="sem+glo", provenance=None, g_provenance=None):
    """Gated residual injection of ``g`` into the visual prefix of ``h``.

    ``h`` is ``(..., T + L, C)`` and ``g`` is ``(..., T, C)``. Text positions
    are passed through untouched.
    """
    h, g = _wrap(h), _wrap(g)
    if provenance is not None and g_provenance is not None:
        if not np.array_equal(np.asarray(provenance), np.asarray(g_provenance)):
            raise ProvenanceError("geometric tokens are not aligned with the visual positions")
    n_vis = g.shape[-2]
    total = h.shape[-2]
    if h.shape[:-2] != g.shape[:-2] or h.shape[-1] != g.shape[-1] or n_vis > total:
        raise ValueError(f"inject: feature {g.shape} incompatible with hidden state {h.shape}")
    vis = _tokens(h, 0, n_vis)
    if mode == "none":
        update = g
    elif mode in ("sem", "sem+glo"):
        update = ag.mul(semantic_gate(vis, layer, gates), g)
        if mode == "sem+glo":
            update = ag.scalar_mul(update, global_gate(layer, gates))
    else:
        raise ValueError(f"unknown gating mode {mode!r}")
    out_vis = ag.add(vis, update)
    if n_vis == total:
        return out_vis
    return ag.concat([out_vis, _tokens(h, n_vis, total)], axis=-2)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg, rng, name):
        C, depth = cfg.C_llm, cfg.num_layers
        self.heads = cfg.heads
        self.ln1 = LayerNorm(C, f"{name}.ln1")
        self.qkv = Linear(C, 3 * C, rng, f"{name}.attn.qkv")
        self.proj = Linear(C, C, rng, f"{name}.attn.proj", gain=1.0 / np.sqrt(2 * depth))
        self.ln2 = LayerNorm(C, f"{name}.ln2")
        self.fc1 = Linear(C, cfg.ffn, rng, f"{name}.mlp.fc1", gain=np.sqrt(2.0))
        self.fc2 = Linear(cfg.ffn, C, rng, f"{name}.mlp.fc2", gain=1.0 / np.sqrt(2 * depth))

    def __call__(self, x, mask):
        B, S, C = x.shape
        H = self.heads
        dh = C // H
        qkv = ag.reshape(self.qkv(self.ln1(x)), (B, S, 3, H, dh))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (ag.reshape(ag.slice_(qkv, (slice(i, i + 1),)), (B, H, S, dh)) for i in range(3))
        scores = ag.scalar_mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ag.softmax(ag.add(scores, mask))
        y = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, S, C))
        x = ag.add(x, self.proj(y))
        return ag.add(x, self.fc2(ag.relu(self.fc1(self.ln2(x)))))


def prefix_mask(n_visual, total):
    """True where attention is allowed: full visual prefix, causal over text."""
    i = np.arange(total)[:, None]
    j = np.arange(total)[None, :]
    return (j < n_visual) | (j <= i)


class GuideDecoder(Module):
    """Embeddings, projectors, gate bank and decoder blocks.

    ``macro_projector`` maps the terminal geometric layer onto the visual
    tokens for input anchoring; ``projectors[j]`` maps sampled layer ``j``.
    Parameter groups (``macro``, ``projectors``, ``gates``, ``embeddings``,
    ``decoder``) can be frozen through ``cfg.trainable``.
    """

    def __init__(self, cfg: DecoderConfig, C_geo, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.C_geo = C_geo
        # one stream per component, so models that differ only in m share every common weight
        stream = lambda tag: np.random.default_rng([seed, 0xD3C, tag])
        C = cfg.C_llm
        rng = stream(0)
        self.text_embed = param(rng.normal(0.0, 1.0, size=(cfg.vocab_size, C)), "embed.text")
        self.pos_embed = param(rng.normal(0.0, 0.1, size=(cfg.max_len, C)), "embed.pos")
        self.macro_projector = MergeProjector(C_geo, C, rng=stream(1), name="proj.macro")
        self.projectors = [MergeProjector(C_geo, C, rng=stream(100 + j), name=f"proj.{j}")
                           for j in range(1, cfg.m + 1)]
        self.gates = GateBank(cfg.m, C, cfg.gate_hidden, stream(2), per_token=cfg.gate_granularity == "token")
        rng = stream(3)
        self.blocks = [Block(cfg, rng, f"blocks.{l}") for l in range(1, cfg.num_layers + 1)]
        self.ln_f = LayerNorm(C, "ln_f")
        self.head = Linear(C, cfg.n_answers, rng, "head", gain=0.02)
        self._masks = {}
        self._apply_trainable()

    def group_of(self, name):
        if name.startswith("proj.macro"):
            return "macro"
        if name.startswith("proj."):
            return "projectors"
        if name.startswith("gates."):
            return "gates"
        if name.startswith("embed."):
            return "embeddings"
        return "decoder"

    def _apply_trainable(self):
        groups = set(self.cfg.trainable)
        if "decoder" in groups:
            groups.add("embeddings")
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) in groups

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    # ------------------------------------------------------------ pieces

    def embed_text(self, token_ids):
        ids = np.asarray(token_ids)
        onehot = np.zeros(ids.shape + (self.cfg.vocab_size,))
        np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
        return ag.matmul(ag.constant(onehot), self.text_embed)

    def add_positions(self, x):
        B, S, _ = x.shape
        if S > self.cfg.max_len:
            raise ValueError(f"sequence of {S} tokens exceeds max_len={self.cfg.max_len}")
        sel = np.zeros((B, S, self.cfg.max_len))
        sel[:, np.arange(S), np.arange(S)] = 1.0
        return ag.add(x, ag.matmul(ag.constant(sel), self.pos_embed))

    def _mask(self, B, n_visual, S):
        key = (B, n_visual, S)
        if key not in self._masks:
            allowed = prefix_mask(n_visual, S)
            add = np.where(allowed, 0.0, MASK_VALUE)
            self._masks[key] = ag.constant(np.broadcast_to(add, (B, self.cfg.heads, S, S)).copy())
        return self._masks[key]

    def project(self, merged_features):
        """Apply the per-layer projectors to pre-concatenated 2x2 blocks ``(B, T, 4*C_geo)``."""
        if len(merged_features) != self.cfg.m:
            raise ValueError(f"expected {self.cfg.m} sampled feature maps, got {len(merged_features)}")
        return [proj(_wrap(f)) for proj, f in zip(self.projectors, merged_features)]

    # ------------------------------------------------------------ forward

    def forward(self, fused, projected, n_visual, return_hidden=False):
        """Run the decoder on an anchored sequence.

        ``projected[j]`` is injected, through the gates, into the hidden
        state entering decoder layer ``j + 1``. Returns logits ``(B, n_answers)``
        read at the last position (plus per-layer outputs if requested).
        """
        cfg = self.cfg
        if len(projected) != cfg.m:
            raise ValueError(f"expected {cfg.m} projected features, got {len(projected)}")
        x = self.add_positions(_wrap(fused))
        B, S, _ = x.shape
        mask = self._mask(B, n_visual, S)
        hidden = []
        for l, block in enumerate(self.blocks, start=1):
            if l <= cfg.m:
                x = inject(x, projected[l - 1], l, self.gates, cfg.gating)
            x = block(x, mask)
            hidden.append(x)
        last = ag.reshape(_tokens(self.ln_f(x), S - 1, S), (B, cfg.C_llm))
        logits = self.head(last)
        return (logits, hidden) if return_hidden else logits


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, V)."""
    labels = np.asarray(labels, dtype=int)
    B, V = logits.shape
    onehot = np.zeros((B, V))
    onehot[np.arange(B), labels] = 1.0
    picked = ag.sum_(ag.mul(ag.log_softmax(logits), ag.constant(onehot)))
    return ag.scalar_mul(picked, -1.0 / B)
