import numpy as np
import pytest

from attribrec import netbuild, trainer
from attribrec.ingest import InteractionDataset, ItemAttributes


def make_dataset(positives, attributes, field_names=None, heldout=None, timestamps=None):
    """Hand-built dataset from raw index structures (items/users named by index)."""
    n_users = len(positives)
    n_items = len(attributes)
    if field_names is None:
        field_names = tuple(f"field{k}" for k in range(len(attributes[0])))
    return InteractionDataset(
        users=tuple(f"u{u}" for u in range(n_users)),
        items=tuple(f"i{i}" for i in range(n_items)),
        positives=tuple(tuple(sorted(p)) for p in positives),
        attributes=tuple(
            tuple(frozenset(vals) for vals in item) for item in attributes
        ),
        field_names=tuple(field_names),
        heldout=None if heldout is None else tuple(heldout),
        timestamps=timestamps,
    )


@pytest.fixture
def tiny_ds():
    """3 users, 5 items, 2 attribute fields; items 0-2 share director d1."""
    positives = [(0, 1, 2), (1, 2, 3), (0, 3, 4)]
    attributes = [
        [{"d1"}, {"a1", "a2"}],
        [{"d1"}, {"a2"}],
        [{"d1"}, {"a3"}],
        [{"d2"}, {"a1"}],
        [{"d2"}, {"a4"}],
    ]
    return make_dataset(positives, attributes, field_names=("director", "actor"))


@pytest.fixture
def tiny_nets(tiny_ds):
    return netbuild.build_network_set(tiny_ds)


def micro_config(**kw):
    base = dict(
        batch_size=6,
        learning_rate=0.01,
        alpha=2.0,
        beta=0.2,
        epochs=2,
        seed=0,
        mode="full",
        hidden_dims=(8, 4),
    )
    base.update(kw)
    return trainer.TrainConfig(**base)


def random_micro_fixture(rng, n_users=4, n_items=8, n_fields=2, hist=3):
    """Random small dataset + networks for gradient and oracle tests."""
    positives = []
    for _ in range(n_users):
        positives.append(tuple(sorted(rng.choice(n_items, size=hist, replace=False).tolist())))
    attributes = [
        [{f"v{rng.integers(3)}"} for _ in range(n_fields)] for _ in range(n_items)
    ]
    ds = make_dataset(positives, attributes)
    return ds, netbuild.build_network_set(ds)


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Finite-difference agreement: |a - n| <= atol + rtol * max(|a|, |n|).

    The atol floor covers components that are exactly or numerically zero,
    where the 1e-5 central-difference step cannot resolve below ~1e-10.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n)))


def central_diff(fn, arr, h=1e-5):
    """Central finite differences of scalar fn w.r.t. every entry of arr (in place)."""
    grad = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = fn()
        arr[idx] = orig - h
        fm = fn()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
