"""On-disk feature store and a synthetic generator of multi-model features.

A store is a directory holding ``manifest.json`` and ``features.bin``. The blob
layout (little-endian)::

    "HADF" | u32 version | u64 count | count * record
    record = u32 len | utf8 item id | u8 modality | u32 len | utf8 model id
             | u32 rows | u32 d_tok | rows*d_tok f64 | u32 d_glob | d_glob f64
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DimMismatchError,
    StoreError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"HADF"
VERSION = 1
MODALITIES = ("image", "text")
SPLITS = ("train", "val", "test")


@dataclass
class FeatureRecord:
    item_id: str
    modality: str
    model_id: str
    tokens: np.ndarray  # (N+1, d_tok), row 0 is CLS
    global_: np.ndarray  # (d_glob,)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.global_ = np.asarray(self.global_, dtype=np.float64)
        if self.modality not in MODALITIES:
            raise StoreError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise DimMismatchError(f"{self.item_id}/{self.model_id}: bad token shape {self.tokens.shape}")
        if self.global_.ndim != 1 or self.global_.shape[0] < 1:
            raise DimMismatchError(f"{self.item_id}/{self.model_id}: bad global shape {self.global_.shape}")
        if not (np.all(np.isfinite(self.tokens)) and np.all(np.isfinite(self.global_))):
            raise StoreError(f"{self.item_id}/{self.model_id}: non-finite feature values")

    @property
    def n_patches(self):
        return self.tokens.shape[0] - 1

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.modality == other.modality
            and self.model_id == other.model_id
            and self.tokens.shape == other.tokens.shape
            and self.tokens.tobytes() == other.tokens.tobytes()
            and self.global_.tobytes() == other.global_.tobytes()
        )


@dataclass(frozen=True)
class ModelSpec:
    id: str
    d_tok: int
    d_glob: int
    variable_len: bool = False


@dataclass
class StoreManifest:
    version: int = VERSION
    models: list = field(default_factory=list)  # list[ModelSpec]
    items: dict = field(default_factory=dict)  # id -> {"modality": ..., "split": ...}
    pairs: dict = field(default_factory=dict)  # image id -> list of text ids

    def model(self, model_id):
        for m in self.models:
            if m.id == model_id:
                return m
        raise StoreError(f"model {model_id!r} not in manifest")

    @property
    def model_ids(self):
        return [m.id for m in self.models]

    def images(self, split=None):
        return [i for i, meta in self.items.items()
                if meta["modality"] == "image" and (split is None or meta["split"] == split)]

    def texts(self, split=None):
        return [i for i, meta in self.items.items()
                if meta["modality"] == "text" and (split is None or meta["split"] == split)]

    def image_of(self):
        return {t: img for img, texts in self.pairs.items() for t in texts}

    def to_json(self):
        return {
            "version": self.version,
            "models": [
                {"id": m.id, "d_tok": m.d_tok, "d_glob": m.d_glob, "variable_len": m.variable_len}
                for m in self.models
            ],
            "items": [{"id": i, "modality": meta["modality"], "split": meta["split"]}
                      for i, meta in self.items.items()],
            "pairs": [{"image_id": img, "text_ids": list(texts)} for img, texts in self.pairs.items()],
        }

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(
                version=int(doc["version"]),
                models=[ModelSpec(m["id"], int(m["d_tok"]), int(m["d_glob"]), bool(m["variable_len"]))
                        for m in doc["models"]],
                items={it["id"]: {"modality": it["modality"], "split": it["split"]} for it in doc["items"]},
                pairs={p["image_id"]: list(p["text_ids"]) for p in doc["pairs"]},
            )
        except (KeyError, TypeError) as exc:
            raise StoreError(f"malformed manifest: {exc}") from exc


def validate(records, manifest):
    """Check records against the manifest; raise before anything is written."""
    specs = {m.id: m for m in manifest.models}
    for r in records:
        spec = specs.get(r.model_id)
        if spec is None:
            raise DimMismatchError(f"record {r.item_id} uses unknown model {r.model_id!r}")
        if r.tokens.shape[1] != spec.d_tok or r.global_.shape[0] != spec.d_glob:
            raise DimMismatchError(
                f"record {r.item_id}/{r.model_id}: dims ({r.tokens.shape[1]}, {r.global_.shape[0]})"
                f" != manifest ({spec.d_tok}, {spec.d_glob})"
            )
        meta = manifest.items.get(r.item_id)
        if meta is not None and meta["modality"] != r.modality:
            raise StoreError(f"record {r.item_id}: modality {r.modality} != manifest {meta['modality']}")
    for img, texts in manifest.pairs.items():
        for item in (img, *texts):
            if item not in manifest.items:
                raise StoreError(f"pair references missing item {item!r}")


def encode_records(records):
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", VERSION, len(records))
    for r in records:
        iid = r.item_id.encode("utf-8")
        mid = r.model_id.encode("utf-8")
        out += struct.pack("<I", len(iid)) + iid
        out += struct.pack("<B", MODALITIES.index(r.modality))
        out += struct.pack("<I", len(mid)) + mid
        out += struct.pack("<II", *r.tokens.shape)
        out += r.tokens.astype("<f8").tobytes()
        out += struct.pack("<I", r.global_.shape[0])
        out += r.global_.astype("<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"truncated payload at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def decode_records(buf):
    rd = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a HADF feature blob")
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    (count,) = rd.unpack("<Q")
    records = []
    for _ in range(count):
        (n,) = rd.unpack("<I")
        item_id = rd.take(n).decode("utf-8")
        (mod,) = rd.unpack("<B")
        if mod >= len(MODALITIES):
            raise StoreError(f"bad modality code {mod}")
        (n,) = rd.unpack("<I")
        model_id = rd.take(n).decode("utf-8")
        rows, d_tok = rd.unpack("<II")
        tokens = rd.floats(rows * d_tok).reshape(rows, d_tok)
        (d_glob,) = rd.unpack("<I")
        glob = rd.floats(d_glob)
        records.append(FeatureRecord(item_id, MODALITIES[mod], model_id, tokens, glob))
    if rd.pos != len(buf):
        raise StoreError(f"{len(buf) - rd.pos} trailing bytes after last record")
    return records


def write_store(records, manifest, path):
    validate(records, manifest)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = encode_records(records)
    doc = json.dumps(manifest.to_json(), indent=1, sort_keys=True)
    (path / "features.bin").write_bytes(blob)
    (path / "manifest.json").write_text(doc + "\n", encoding="utf-8")


def read_store(path):
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "features.bin").read_bytes()
    except FileNotFoundError as exc:
        raise StoreError(f"incomplete store at {path}: {exc.filename} missing") from exc
    manifest = StoreManifest.from_json(doc)
    if manifest.version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {manifest.version}")
    records = decode_records(blob)
    validate(records, manifest)
    return records, manifest


class FeatureStore:
    """In-memory index over (item, model) records."""

    def __init__(self, records, manifest):
        self.manifest = manifest
        self.records = {(r.item_id, r.model_id): r for r in records}

    @classmethod
    def open(cls, path):
        return cls(*read_store(path))

    def get(self, item_id, model_id):
        try:
            return self.records[(item_id, model_id)]
        except KeyError:
            raise StoreError(f"no features for item {item_id!r} from model {model_id!r}") from None

    def item_records(self, item_id, model_ids):
        return {m: self.get(item_id, m) for m in model_ids}

    def globals_matrix(self, item_ids, model_id, normalize=True):
        g = np.stack([self.get(i, model_id).global_ for i in item_ids]) if item_ids else np.zeros((0, 1))
        if normalize and len(item_ids):
            g = g / np.linalg.norm(g, axis=1, keepdims=True)
        return g


# -- synthetic data -----------------------------------------------------------

@dataclass
class SyntheticModel:
    id: str
    d_tok: int
    d_glob: int
    tokens: tuple = (8, 8)  # inclusive range of image patch counts N
    text_tokens: tuple = (6, 6)  # inclusive range of text token counts L
    noise: float | None = None  # overrides the global noise scale

    @property
    def variable_len(self):
        return self.tokens[0] != self.tokens[1] or self.text_tokens[0] != self.text_tokens[1]


@dataclass
class SyntheticConfig:
    items: int = 64
    latent_dim: int = 16
    models: list = field(default_factory=lambda: [
        SyntheticModel("vit", d_tok=12, d_glob=8, tokens=(8, 8)),
        SyntheticModel("det", d_tok=10, d_glob=10, tokens=(4, 12)),
    ])
    texts_per_image: int = 1
    noise: float = 0.5
    seed: int = 0

    def validate(self):
        if self.noise < 0:
            raise ConfigError("noise scale must be >= 0")
        if self.items < 0 or self.latent_dim < 1 or self.texts_per_image < 1:
            raise ConfigError("item count, latent dim and texts per image must be positive")
        if not self.models:
            raise ConfigError("at least one synthetic model required")
        for m in self.models:
            for lo, hi in (m.tokens, m.text_tokens):
                if lo < 0 or hi < lo:
                    raise ConfigError(f"model {m.id}: bad token-count range ({lo}, {hi})")
            if m.d_tok < 1 or m.d_glob < 1:
                raise ConfigError(f"model {m.id}: dims must be >= 1")
            if m.noise is not None and m.noise < 0:
                raise ConfigError(f"model {m.id}: noise must be >= 0")


def generate_synthetic(cfg):
    """Draw features for ``cfg.items`` images and their texts.

    Each image and its texts share a latent vector. Every model owns fixed
    random maps: one for globals (shared across modalities so a pair's globals
    coincide when noise is zero) and one per modality for tokens.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    maps = {}
    for m in cfg.models:
        scale = 1.0 / np.sqrt(cfg.latent_dim)
        maps[m.id] = (
            rng.standard_normal((m.d_glob, cfg.latent_dim)) * scale,
            {mod: rng.standard_normal((m.d_tok, cfg.latent_dim)) * scale for mod in MODALITIES},
        )
    width = len(str(max(cfg.items - 1, 0)))
    records, items, pairs = [], {}, {}

    def emit(item_id, modality, z):
        for m in cfg.models:
            eps = cfg.noise if m.noise is None else m.noise
            glob_map, tok_maps = maps[m.id]
            lo, hi = m.tokens if modality == "image" else m.text_tokens
            n = int(rng.integers(lo, hi + 1))
            glob = glob_map @ z + eps * rng.standard_normal(m.d_glob)
            norm = np.linalg.norm(glob)
            glob = glob / norm if norm > 0 else glob
            base = tok_maps[modality] @ z
            tokens = base[None, :] + eps * rng.standard_normal((n + 1, m.d_tok))
            records.append(FeatureRecord(item_id, modality, m.id, tokens, glob))
        items[item_id] = {"modality": modality, "split": "train"}

    for k in range(cfg.items):
        z = rng.standard_normal(cfg.latent_dim)
        img = f"img{k:0{width}d}"
        emit(img, "image", z)
        texts = []
        for t in range(cfg.texts_per_image):
            tid = f"txt{k:0{width}d}_{t}"
            emit(tid, "text", z)
            texts.append(tid)
        pairs[img] = texts
    manifest = StoreManifest(
        models=[ModelSpec(m.id, m.d_tok, m.d_glob, m.variable_len) for m in cfg.models],
        items=items,
        pairs=pairs,
    )
    return records, manifest


def split_dataset(manifest, fractions, seed):
    """Assign train/val/test labels by image; texts follow their image."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    images = sorted(manifest.pairs)
    order = np.random.default_rng(seed).permutation(len(images))
    n = len(images)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    items = {k: dict(v) for k, v in manifest.items.items()}
    for pos, idx in enumerate(order):
        img = images[idx]
        items[img]["split"] = labels[pos]
        for t in manifest.pairs[img]:
            items[t]["split"] = labels[pos]
    return StoreManifest(version=manifest.version, models=list(manifest.models), items=items,
                         pairs={k: list(v) for k, v in manifest.pairs.items()})


def write_embeddings(path, item_ids, modalities, matrix, model_id="hada"):
    """Dump one embedding per item in the feature-blob layout with no token rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", VERSION, len(item_ids))
    mid = model_id.encode("utf-8")
    for item_id, modality, row in zip(item_ids, modalities, matrix):
        iid = item_id.encode("utf-8")
        out += struct.pack("<I", len(iid)) + iid
        out += struct.pack("<B", MODALITIES.index(modality))
        out += struct.pack("<I", len(mid)) + mid
        out += struct.pack("<II", 0, 0)
        out += struct.pack("<I", row.shape[0]) + row.astype("<f8").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def read_embeddings(path):
    """Inverse of :func:`write_embeddings`: returns (ids, modalities, matrix)."""
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a HADF blob")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    (count,) = rd.unpack("<Q")
    ids, mods, rows = [], [], []
    for _ in range(count):
        (n,) = rd.unpack("<I")
        ids.append(rd.take(n).decode("utf-8"))
        (mod,) = rd.unpack("<B")
        mods.append(MODALITIES[mod])
        (n,) = rd.unpack("<I")
        rd.take(n)
        n_rows, d_tok = rd.unpack("<II")
        rd.floats(n_rows * d_tok)
        (d,) = rd.unpack("<I")
        rows.append(rd.floats(d))
    return ids, mods, np.stack(rows) if rows else np.zeros((0, 0))
