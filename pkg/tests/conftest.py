import numpy as np
import pytest

from graydino import data
from graydino.backbone import ViTConfig

# Small config used wherever a full-size model would slow the suite down.
TINY = ViTConfig(patch_size=4, dim=16, depth=2, heads=2, view_sizes=(8,),
                 num_prototypes=8, bottleneck_dim=8, head_hidden=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_manifest(seed: int, count: int, template: data.PhantomTemplate | None = None,
                  labeled: bool = True) -> data.DatasetManifest:
    """Phantom-backed manifest for pipeline tests."""
    tpl = template or data.PhantomTemplate()
    r = data.derive_rng(seed, 0)
    records = []
    for _ in range(count):
        spec = data.sample_phantom_spec(tpl, r)
        records.append(data.ManifestRecord(phantom=spec,
                                           label=spec.label if labeled else None))
    return data.DatasetManifest(seed=seed, records=records)
