import numpy as np
import pytest

from cmmd.model import Batch, CmmdModel, ModalityPartition


def small_model(seed=0, latent_dim=3, num_classes=3, families=None, widths=None, observed=("x1",),
                missing=("x2",), hidden=(6,), **kw):
    widths = widths or (("x1", 5), ("x2", 4))
    families = families or {m: "gaussian" for m in missing}
    kw.setdefault("dropout", 0.2)
    model = CmmdModel(ModalityPartition(widths, observed, missing), families, latent_dim, num_classes,
                      encoder_hidden=hidden, prior_hidden=hidden, decoder_hidden=hidden,
                      classifier_hidden=(4,), **kw)
    return model.init_params(np.random.default_rng(seed))


def random_batch(model, rows=8, seed=1):
    rng = np.random.default_rng(seed)
    x = {}
    for name, width in model.partition.widths:
        if model.families.get(name) == "bernoulli":
            x[name] = (rng.random((rows, width)) < 0.5).astype(float)
        else:
            x[name] = rng.standard_normal((rows, width))
    labels = rng.integers(0, model.num_classes, size=rows)
    y = np.zeros((rows, model.num_classes))
    y[np.arange(rows), labels] = 1.0
    return Batch(x, y)


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def batch(model):
    return random_batch(model)
