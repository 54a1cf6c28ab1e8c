"""Full per-modality forward pass, similarity scoring and the ITM discriminator.

``variant="hada"`` runs projections, the fusion graph and GATv2, then
concatenates the updated CLS vectors with the original globals before the
output stack. ``variant="b2"`` skips the graph and feeds the concatenated
globals straight into the output stack.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, InputError
from .gatv2 import GatHead, GatLayer, multi_head_forward
from .graph import ProjectionParams, build_batch
from .numerics import (
    Tensor,
    absolute,
    add,
    concat,
    elu,
    l2_normalize,
    linear,
    matmul,
    mul,
    reshape,
    sigmoid,
    sub,
    transpose,
)

MOD_KEYS = {"image": "img", "text": "txt"}
TAU_RANGE = (0.001, 0.5)
ALPHA_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class ModelConfig:
    models: tuple  # ((model_id, d_tok, d_glob), ...)
    d_shared: int = 512
    heads: int = 4
    d_out: int = 512
    d_h: int = 256
    head_depth: int = 2
    proj_bias: bool = True
    leaky_slope: float = 0.2
    dropout: float = 0.7
    anchor: str | None = None
    variant: str = "hada"
    normalize_anchor: bool = True
    tau_init: float = 0.07

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(tuple(m) for m in self.models))
        if not self.models:
            raise ConfigError("at least one upstream model is required")
        if self.variant not in ("hada", "b2"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.heads < 1 or self.d_out % self.heads:
            raise ConfigError(f"d_out={self.d_out} must be a positive multiple of heads={self.heads}")
        if self.head_depth not in (1, 2):
            raise ConfigError("head_depth must be 1 or 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.anchor is not None and self.anchor not in self.model_ids:
            raise ConfigError(f"anchor {self.anchor!r} is not one of {self.model_ids}")

    @classmethod
    def from_manifest(cls, manifest, model_ids=None, **kw):
        ids = model_ids or manifest.model_ids
        specs = [manifest.model(m) for m in ids]
        return cls(models=tuple((s.id, s.d_tok, s.d_glob) for s in specs), **kw)

    @property
    def model_ids(self):
        return [m[0] for m in self.models]

    @property
    def anchor_id(self):
        return self.anchor or self.models[0][0]

    @property
    def head_in(self):
        glob = sum(m[2] for m in self.models)
        return glob if self.variant == "b2" else len(self.models) * self.d_out + glob

    def to_json(self):
        d = asdict(self)
        d["models"] = [list(m) for m in self.models]
        return d

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)

    def hash(self):
        """CRC32 of the architecture fields; training-only knobs are excluded."""
        d = self.to_json()
        for key in ("dropout", "tau_init"):
            d.pop(key)
        return zlib.crc32(json.dumps(d, sort_keys=True).encode()) & 0xFFFFFFFF


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class HadaParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    phase: int = 1

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def tau(self):
        return self.tensors["tau"]

    @property
    def alpha(self):
        return self.tensors["alpha"]

    def trainable(self):
        """Parameters updated by the optimizer; alpha is frozen in phase 1."""
        return {k: t for k, t in self.tensors.items() if not (k == "alpha" and self.phase == 1)}

    def n_parameters(self, include_scalars=True):
        return sum(t.size for k, t in self.tensors.items() if include_scalars or k not in ("tau", "alpha"))

    def projections(self, modality):
        key = MOD_KEYS[modality]
        return ProjectionParams({
            (m, modality): (self.tensors[f"{key}.proj.{m}.weight"], self.tensors.get(f"{key}.proj.{m}.bias"))
            for m in self.config.model_ids
        })

    def gat_layer(self, modality):
        key = MOD_KEYS[modality]
        heads = [GatHead(self.tensors[f"{key}.gat.head{h}.W1"], self.tensors[f"{key}.gat.head{h}.W2"],
                         self.tensors[f"{key}.gat.head{h}.A"]) for h in range(self.config.heads)]
        return GatLayer(heads, self.tensors[f"{key}.gat.out.weight"], self.tensors[f"{key}.gat.out.bias"],
                        self.config.leaky_slope)

    def head_layers(self, modality):
        key = MOD_KEYS[modality]
        return [(self.tensors[f"{key}.head.{i}.weight"], self.tensors[f"{key}.head.{i}.bias"])
                for i in range(self.config.head_depth)]

    def clamp(self):
        """Project tau (and alpha in phase 2) back into their allowed ranges."""
        np.clip(self.tau.values, *TAU_RANGE, out=self.tau.values)
        if self.phase == 2:
            np.clip(self.alpha.values, *ALPHA_RANGE, out=self.alpha.values)

    def start_phase2(self, alpha=0.5):
        self.phase = 2
        self.alpha.values[...] = alpha
        self.clamp()

    def copy(self):
        return HadaParams(
            self.config,
            {k: Tensor(t.values.copy(), name=k, requires_grad=True) for k, t in self.tensors.items()},
            self.phase,
        )


def init_params(config, seed=0):
    """Seeded initialization: weights ~ U(+-1/sqrt(fan_in)), biases 0."""
    rng = np.random.default_rng(seed)
    t = {}

    def weight(name, out_dim, in_dim):
        t[name] = _uniform(rng, (out_dim, in_dim), in_dim)

    d_head = config.d_out // config.heads
    for modality, key in MOD_KEYS.items():
        if config.variant == "hada":
            for m, d_tok, _ in config.models:
                weight(f"{key}.proj.{m}.weight", config.d_shared, d_tok)
                if config.proj_bias:
                    t[f"{key}.proj.{m}.bias"] = np.zeros(config.d_shared)
            for h in range(config.heads):
                weight(f"{key}.gat.head{h}.W1", d_head, config.d_shared)
                weight(f"{key}.gat.head{h}.W2", d_head, config.d_shared)
                t[f"{key}.gat.head{h}.A"] = _uniform(rng, (d_head,), d_head)
            weight(f"{key}.gat.out.weight", config.d_out, config.heads * d_head)
            t[f"{key}.gat.out.bias"] = np.zeros(config.d_out)
        dims = [config.head_in] + [config.d_h] * config.head_depth
        for i in range(config.head_depth):
            weight(f"{key}.head.{i}.weight", dims[i + 1], dims[i])
            t[f"{key}.head.{i}.bias"] = np.zeros(dims[i + 1])
    t["itm.weight"] = _uniform(rng, (4 * config.d_h,), 4 * config.d_h)
    t["tau"] = np.array(config.tau_init)
    t["alpha"] = np.array(0.0)
    return HadaParams(config, {k: Tensor(v, name=k, requires_grad=True) for k, v in t.items()})


def _require(records, model_ids):
    for m in model_ids:
        if m not in records:
            raise InputError(f"missing features from model {m!r}")


def embed_batch(params, items, modality, rng=None):
    """Embed a list of ``{model_id: FeatureRecord}`` into unit rows (B, d_h).

    Dropout is active only when ``rng`` is given.
    """
    cfg = params.config
    ids = cfg.model_ids
    for it in items:
        _require(it, ids)
    p = cfg.dropout if rng is not None else 0.0
    glob = Tensor(np.stack([np.concatenate([it[m].global_ for m in ids]) for it in items]))
    if cfg.variant == "hada":
        graph = build_batch(items, params.projections(modality), ids, modality, rng, p)
        cls = multi_head_forward(params.gat_layer(modality), graph, rng, p)
        x = concat([reshape(cls, (len(items), len(ids) * cfg.d_out)), glob], axis=1)
    else:
        x = glob
    layers = params.head_layers(modality)
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = elu(x)
    return l2_normalize(x)


def embed(records, params, modality, train=False, rng=None):
    """Embed one item; returns a unit vector of length d_h as a Tensor."""
    out = embed_batch(params, [records], modality, rng if train else None)
    return reshape(out, (params.config.d_h,))


def b2_embed(records, params, modality):
    if params.config.variant != "b2":
        raise ConfigError("b2_embed needs parameters built with variant='b2'")
    return embed(records, params, modality)


def anchor_globals(items, params):
    g = np.stack([it[params.config.anchor_id].global_ for it in items])
    if params.config.normalize_anchor:
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
    return g


def similarity(h_p, h_s):
    return float(np.dot(getattr(h_p, "values", h_p), getattr(h_s, "values", h_s)))


def weighted_similarity(h_p, h_s, anchor_v, anchor_w, alpha):
    """(1 - alpha) <h_p, h_s> + alpha <anchor_v, anchor_w>."""
    alpha = float(getattr(alpha, "values", alpha))
    return (1.0 - alpha) * similarity(h_p, h_s) + alpha * similarity(anchor_v, anchor_w)


def score_matrix(h_img, h_txt, anchor_img=None, anchor_txt=None, alpha=None):
    """Image-by-text score Tensor; weighted when anchors and alpha are given."""
    fused = matmul(h_img, transpose(h_txt))
    if alpha is None:
        return fused
    anchor = Tensor(np.asarray(anchor_img) @ np.asarray(anchor_txt).T)
    return add(mul(sub(1.0, alpha), fused), mul(alpha, anchor))


def discriminate(h_p, h_s, weight):
    """Match probability for each row pair of (h_p, h_s)."""
    squeeze = h_p.ndim == 1
    if squeeze:
        h_p = reshape(h_p, (1, h_p.shape[0]))
        h_s = reshape(h_s, (1, h_s.shape[0]))
    feats = concat([h_p, h_s, absolute(sub(h_p, h_s)), mul(h_p, h_s)], axis=1)
    w = reshape(weight, (weight.shape[0], 1))
    prob = sigmoid(reshape(matmul(feats, w), (feats.shape[0],)))
    return reshape(prob, ()) if squeeze else prob


def with_variant(config, variant):
    return replace(config, variant=variant)
