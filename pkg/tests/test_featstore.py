import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hada.errors import (
    BadMagicError,
    ConfigError,
    DimMismatchError,
    StoreError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from hada.featstore import (
    FeatureRecord,
    ModelSpec,
    StoreManifest,
    SyntheticConfig,
    SyntheticModel,
    decode_records,
    encode_records,
    generate_synthetic,
    read_embeddings,
    read_store,
    split_dataset,
    write_embeddings,
    write_store,
)

from .conftest import small_synthetic


def one_pair_store(rng):
    recs = [
        FeatureRecord("i0", "image", "m", rng.standard_normal((3, 4)), rng.standard_normal(2)),
        FeatureRecord("t0", "text", "m", rng.standard_normal((5, 4)), rng.standard_normal(2)),
    ]
    man = StoreManifest(
        models=[ModelSpec("m", 4, 2, True)],
        items={"i0": {"modality": "image", "split": "train"}, "t0": {"modality": "text", "split": "train"}},
        pairs={"i0": ["t0"]},
    )
    return recs, man


def test_empty_store_roundtrip(tmp_path):
    write_store([], StoreManifest(), tmp_path)
    recs, man = read_store(tmp_path)
    assert recs == [] and man.items == {} and man.models == []


def test_one_pair_roundtrip_bit_exact(tmp_path, rng):
    recs, man = one_pair_store(rng)
    write_store(recs, man, tmp_path)
    back, man2 = read_store(tmp_path)
    assert back == recs
    assert man2.to_json() == man.to_json()


def test_manifest_reflects_wide_dims(tmp_path, rng):
    recs = [
        FeatureRecord("i0", "image", "albef", rng.standard_normal((2, 768)), rng.standard_normal(256)),
        FeatureRecord("i0", "image", "dot", rng.standard_normal((4, 768)), rng.standard_normal(768)),
    ]
    man = StoreManifest(
        models=[ModelSpec("albef", 768, 256), ModelSpec("dot", 768, 768, True)],
        items={"i0": {"modality": "image", "split": "test"}},
    )
    write_store(recs, man, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert {(m["id"], m["d_tok"], m["d_glob"]) for m in doc["models"]} == {("albef", 768, 256), ("dot", 768, 768)}
    assert set(doc) == {"version", "models", "items", "pairs"}


def test_inconsistent_dims_rejected_before_write(tmp_path, rng):
    recs, man = one_pair_store(rng)
    man.models = [ModelSpec("m", 5, 2)]
    with pytest.raises(DimMismatchError):
        write_store(recs, man, tmp_path / "s")
    assert not (tmp_path / "s").exists()


def test_truncated_payload(rng):
    recs, _ = one_pair_store(rng)
    blob = encode_records(recs)
    for cut in (5, 17, len(blob) // 2, len(blob) - 1):
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            decode_records(blob[:cut])


def test_unsupported_version(rng):
    recs, _ = one_pair_store(rng)
    blob = bytearray(encode_records(recs))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(UnsupportedVersionError, match="unsupported version"):
        decode_records(bytes(blob))


def test_bad_magic():
    with pytest.raises(BadMagicError):
        decode_records(b"NOPE" + bytes(12))


def test_header_layout(rng):
    recs, _ = one_pair_store(rng)
    blob = encode_records(recs)
    assert blob[:4] == b"HADF"
    assert struct.unpack("<IQ", blob[4:16]) == (1, 2)
    (n,) = struct.unpack("<I", blob[16:20])
    assert blob[20:20 + n] == b"i0" and blob[20 + n] == 0


def test_manifest_dim_mismatch_on_read(tmp_path, rng):
    recs, man = one_pair_store(rng)
    write_store(recs, man, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["models"][0]["d_glob"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DimMismatchError):
        read_store(tmp_path)


def test_pair_referencing_missing_item(rng):
    recs, man = one_pair_store(rng)
    man.pairs["i0"].append("ghost")
    with pytest.raises(StoreError, match="missing item"):
        write_store(recs, man, "/nonexistent/never")


def test_nonfinite_record_rejected():
    with pytest.raises(StoreError):
        FeatureRecord("x", "image", "m", np.array([[np.nan]]), np.ones(1))


@st.composite
def random_stores(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    r = np.random.default_rng(seed)
    n_models = draw(st.integers(1, 3))
    models = [ModelSpec(f"m{k}é", int(r.integers(1, 6)), int(r.integers(1, 6)), True) for k in range(n_models)]
    n_img = draw(st.integers(0, 4))
    recs, items, pairs = [], {}, {}
    for i in range(n_img):
        texts = [f"t{i}_{j}" for j in range(int(r.integers(1, 3)))]
        pairs[f"i{i}"] = texts
        for item, mod in [(f"i{i}", "image")] + [(t, "text") for t in texts]:
            items[item] = {"modality": mod, "split": str(r.choice(["train", "val", "test"]))}
            for m in models:
                rows = int(r.integers(1, 5))
                recs.append(FeatureRecord(item, mod, m.id, r.standard_normal((rows, m.d_tok)) * 1e3,
                                          r.standard_normal(m.d_glob)))
    return recs, StoreManifest(models=models, items=items, pairs=pairs)


@settings(max_examples=100, deadline=None)
@given(random_stores())
def test_fuzzed_roundtrip(tmp_path_factory, case):
    recs, man = case
    path = tmp_path_factory.mktemp("store")
    write_store(recs, man, path)
    back, man2 = read_store(path)
    assert back == recs
    assert man2.to_json() == man.to_json()


# -- synthetic generator ------------------------------------------------------

def test_synthetic_same_seed_identical_bytes(tmp_path):
    for name in ("a", "b"):
        recs, man = small_synthetic(seed=5)
        write_store(recs, man, tmp_path / name)
    for f in ("features.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synthetic_token_count_range():
    cfg = SyntheticConfig(items=30, models=[SyntheticModel("v", 3, 3, tokens=(4, 12))], seed=2)
    recs, man = generate_synthetic(cfg)
    counts = [r.n_patches for r in recs if r.modality == "image"]
    assert min(counts) >= 4 and max(counts) <= 12 and len(set(counts)) > 1
    assert man.models[0].variable_len


def test_synthetic_default_one_variable_model():
    _, man = generate_synthetic(SyntheticConfig(items=2))
    assert sum(m.variable_len for m in man.models) == 1


def test_noise_free_globals_equal():
    recs, man = small_synthetic(noise=0.0)
    by = {(r.item_id, r.model_id): r for r in recs}
    for img, texts in man.pairs.items():
        for m in man.model_ids:
            np.testing.assert_array_equal(by[(img, m)].global_, by[(texts[0], m)].global_)


def test_noise_free_nearest_neighbor_oracle():
    recs, man = small_synthetic(items=40, noise=0.0, seed=9)
    by = {(r.item_id, r.model_id): r for r in recs}
    images = sorted(man.pairs)
    for m in man.model_ids:
        hits = 0
        for img in images:
            # brute force: scan every text and keep the best dot product
            best, best_t = -np.inf, None
            for other in images:
                t = man.pairs[other][0]
                s = float(by[(img, m)].global_ @ by[(t, m)].global_)
                if s > best:
                    best, best_t = s, t
            hits += best_t in man.pairs[img]
        assert hits / len(images) == 1.0


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(noise=-1.0))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(models=[SyntheticModel("x", 0, 2)]))


# -- splits -----------------------------------------------------------------

def test_split_all_train():
    _, man = small_synthetic(items=10)
    out = split_dataset(man, (1, 0, 0), 0)
    assert all(meta["split"] == "train" for meta in out.items.values())


def test_split_80_10_10():
    _, man = small_synthetic(items=100, texts_per_image=2)
    out = split_dataset(man, (0.8, 0.1, 0.1), 3)
    assert [len(out.images(s)) for s in ("train", "val", "test")] == [80, 10, 10]
    for img, texts in out.pairs.items():
        assert {out.items[t]["split"] for t in texts} == {out.items[img]["split"]}


def test_split_fraction_sum():
    _, man = small_synthetic(items=4)
    with pytest.raises(ConfigError):
        split_dataset(man, (0.5, 0.5, 0.5), 0)


def test_embedding_dump_roundtrip(tmp_path, rng):
    mat = rng.standard_normal((3, 4))
    write_embeddings(tmp_path / "e.bin", ["a", "b", "c"], ["image", "text", "text"], mat)
    ids, mods, back = read_embeddings(tmp_path / "e.bin")
    assert ids == ["a", "b", "c"] and mods == ["image", "text", "text"]
    assert back.tobytes() == mat.tobytes()
