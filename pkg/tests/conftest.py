import numpy as np
import pytest

from papa.data import Dataset, synthetic_blobs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return synthetic_blobs(n=400, n_classes=4, dim=12, seed=3)


def image_dataset(n=32, shape=(1, 8, 8), n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, int(np.prod(shape)))).astype(np.float32)
    y = rng.integers(0, n_classes, n)
    return Dataset(x, y, n_classes, shape)


def train(net, ds, steps=60, lr=0.1, batch=32, seed=0):
    """Plain SGD on one-hot targets; enough to give members distinct features."""
    from papa.data import one_hot
    from papa.nn import backward, forward, loss_softmax_ce
    from papa.optim import make_optimizer, sgd_step

    rng = np.random.default_rng(seed)
    state = make_optimizer("sgd", net.params, mask=net.trainable_mask, momentum=0.9, weight_decay=0.0)
    for _ in range(steps):
        idx = rng.choice(ds.n, size=batch, replace=False)
        z, cache = forward(net, ds.inputs[idx], "train")
        _, dz = loss_softmax_ce(z, one_hot(ds.labels[idx], ds.n_classes, z.dtype))
        sgd_step(net.params, backward(net, cache, dz), state, lr)
        net.touch()
    return net
