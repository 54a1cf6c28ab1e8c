import numpy as np
import pytest

from hada.featstore import FeatureStore, SyntheticConfig, SyntheticModel, generate_synthetic, split_dataset
from hada.model import ModelConfig, init_params


def small_synthetic(items=8, noise=0.5, seed=1, texts_per_image=1):
    cfg = SyntheticConfig(
        items=items,
        latent_dim=6,
        models=[
            SyntheticModel("vit", d_tok=5, d_glob=4, tokens=(3, 3), text_tokens=(2, 2)),
            SyntheticModel("det", d_tok=4, d_glob=3, tokens=(1, 4), text_tokens=(2, 2)),
        ],
        texts_per_image=texts_per_image,
        noise=noise,
        seed=seed,
    )
    return generate_synthetic(cfg)


@pytest.fixture
def small_store():
    records, manifest = small_synthetic()
    manifest = split_dataset(manifest, (0.5, 0.25, 0.25), 0)
    return FeatureStore(records, manifest)


@pytest.fixture
def small_params(small_store):
    cfg = ModelConfig.from_manifest(small_store.manifest, d_shared=8, heads=2, d_out=8, d_h=8, dropout=0.0)
    return init_params(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[label] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
