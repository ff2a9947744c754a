from types import SimpleNamespace

import pytest

from street2vec.corpus import PanoramaStack, index_by_location, load_manifest
from street2vec.synth import SynthConfig, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 12-location, 2-year synthetic corpus shared across test modules."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = SynthConfig(locations=12, years=(2008, 2018), zones=1, seed=7, anomaly_rate=0.0)
    result = generate_corpus(cfg, root, workers=2)
    loaded = load_manifest(result.manifest_path)
    stack = PanoramaStack.build(loaded.records, workers=2)
    return SimpleNamespace(
        config=cfg,
        result=result,
        records=loaded.records,
        stack=stack,
        index=index_by_location(loaded.records),
        root=root,
    )
