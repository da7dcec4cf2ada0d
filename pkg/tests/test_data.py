import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkt import data


def client_with_counts(counts, val_fraction=0.0, cid=0, num_classes=None):
    c = num_classes or max(counts) + 1
    y = np.concatenate([np.full(n, k) for k, n in counts.items()]).astype(int)
    ds = data.Dataset(np.zeros((len(y), 2)), y, c)
    return data._make_client(cid, ds, np.arange(len(y)), val_fraction, np.random.default_rng(0))


@pytest.fixture(scope="module")
def synth():
    return data.generate_synthetic(10, 5, 200, seed=3, test_per_class=20)


def test_synthetic_sizes_and_balance():
    g = data.generate_synthetic(10, 4, 100, seed=0, test_per_class=30)
    assert len(g.train) == 1000 and len(g.test) == 300
    assert set(g.train.class_counts().values()) == {100}
    assert set(g.test.class_counts().values()) == {30}


def test_synthetic_same_seed_same_bytes():
    a = data.generate_synthetic(seed=5, per_class=50)
    b = data.generate_synthetic(seed=5, per_class=50)
    assert a.train.x.tobytes() == b.train.x.tobytes()
    assert a.test.y.tobytes() == b.test.y.tobytes()


def test_tight_clusters_are_linearly_separable():
    g = data.generate_synthetic(2, 5, 200, cluster_spread=1e-3, seed=1)
    # nearest-center rule is a linear classifier for two classes
    mu = np.stack([g.train.x[g.train.y == k].mean(axis=0) for k in range(2)])
    pred = np.argmin(((g.test.x[:, None] - mu) ** 2).sum(-1), axis=1)
    assert np.mean(pred == g.test.y) == 1.0


def test_csv_round_trip(tmp_path, synth):
    path = tmp_path / "d.csv"
    data.save_csv(synth.train, path)
    g = data.load_csv(path, 10, test_fraction=0.2, seed=0)
    assert len(g.train) + len(g.test) == len(synth.train)
    assert len(set(g.test.class_counts().values())) == 1


def test_pathological_default_supports(synth):
    spec = data.PartitionSpec("pathological", 10, 3, seed=0)
    clients = data.partition(synth, spec)
    assert len(clients) == 10
    for c in clients:
        assert len(c.local_classes) == 3
    covered = set().union(*(c.local_classes for c in clients))
    assert covered == set(range(10))


def test_pathological_m_equals_c_sees_everything(synth):
    clients = data.partition(synth, data.PartitionSpec("pathological", 4, 10, seed=1))
    assert all(len(c.local_classes) == 10 for c in clients)


def test_pathological_one_class_each_is_disjoint(synth):
    clients = data.partition(synth, data.PartitionSpec("pathological", 10, 1, seed=2))
    supports = [tuple(c.local_classes) for c in clients]
    assert sorted(s[0] for s in supports) == list(range(10))


def test_pathological_too_many_classes():
    with pytest.raises(data.PartitionError):
        data.pathological_supports(5, 3, 6, np.random.default_rng(0))


def test_counts_within_configured_range(synth):
    spec = data.PartitionSpec("pathological", 10, 3, count_range=(0.3, 1.0), seed=4)
    clients = data.partition(synth, spec)
    holders = {k: sum(k in c.local_classes for c in clients) for k in range(10)}
    for c in clients:
        for k in c.local_classes:
            allot = 200 // holders[k]
            held = int(np.sum(c.y == k))
            assert round(0.3 * allot) <= held <= allot


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["pathological", "dirichlet"]), st.integers(2, 12), st.integers(1, 10), st.integers(0, 10**6))
def test_partition_is_disjoint_and_pathological_support_exact(scheme, num_clients, m, seed):
    g = data.generate_synthetic(10, 3, 60, seed=0, test_per_class=5)
    spec = data.PartitionSpec(scheme, num_clients, m, alpha=0.5, seed=seed)
    clients = data.partition(g, spec)
    idx = np.concatenate([c.global_idx for c in clients])
    assert len(idx) == len(np.unique(idx))
    for c in clients:
        assert np.array_equal(g.train.y[c.global_idx], c.y)
        assert len(np.intersect1d(c.train_idx, c.val_idx)) == 0
        assert len(c.train_idx) + len(c.val_idx) == len(c.y)
        if scheme == "pathological":
            assert len(set(c.y.tolist())) == m
    if scheme == "dirichlet":
        # every sample lands somewhere and per-class counts are conserved
        assert np.array_equal(np.sort(idx), np.arange(len(g.train)))


def test_dirichlet_large_alpha_is_near_uniform():
    g = data.generate_synthetic(10, 3, 2000, seed=0, test_per_class=5)
    clients = data.partition(g, data.PartitionSpec("dirichlet", 5, alpha=1e6, seed=0))
    for c in clients:
        share = np.bincount(c.y, minlength=10) / 2000
        np.testing.assert_allclose(share, 1 / 5, atol=0.05 * (1 / 5))


def test_dirichlet_small_alpha_is_heterogeneous():
    g = data.generate_synthetic(10, 3, 100, seed=0, test_per_class=5)
    for seed in range(20):
        clients = data.partition(g, data.PartitionSpec("dirichlet", 10, alpha=0.1, seed=seed))
        concentrated = False
        for c in clients:
            counts = np.sort(np.bincount(c.y, minlength=10))[::-1]
            if counts.sum() and counts[:2].sum() / counts.sum() > 0.5:
                concentrated = True
        assert concentrated


def test_dirichlet_proportions_rows_sum_to_one():
    p = data.dirichlet_proportions(10, 7, 1e-4, np.random.default_rng(0))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_bad_specs():
    with pytest.raises(data.PartitionError):
        data.PartitionSpec("pathological", 1)
    with pytest.raises(data.PartitionError):
        data.PartitionSpec("dirichlet", 3, alpha=0)
    with pytest.raises(data.PartitionError):
        data.PartitionSpec("pathological", 3, 0)
    with pytest.raises(data.PartitionError):
        data.PartitionSpec("stripes", 3)


def test_query_eligibility_filter():
    client = client_with_counts({0: 100, 1: 0, 2: 3})
    seen = {data.select_query(client, "single", 50, seed=s).query_classes for s in range(40)}
    assert seen == {(1,), (2,)}


def test_query_no_eligible_class():
    client = client_with_counts({0: 60, 1: 70})
    with pytest.raises(data.QuerySelectionError, match="sample_threshold"):
        data.select_query(client, "single", 50)


def test_query_reproducible_and_multi_bounds():
    client = client_with_counts({0: 100, 1: 5, 2: 3, 3: 0, 4: 0, 5: 0, 6: 0}, num_classes=7)
    a = data.select_query(client, "multi", 50, seed=9)
    assert a == data.select_query(client, "multi", 50, seed=9)
    sizes = {len(data.select_query(client, "multi", 50, seed=s).query_classes) for s in range(60)}
    assert sizes == {2, 3, 4}
    for s in range(20):
        q = data.select_query(client, "multi", 50, seed=s).query_classes
        assert 0 not in q and len(set(q)) == len(q)


def test_query_threshold_uses_training_counts():
    client = client_with_counts({0: 100, 1: 55}, val_fraction=0.2)
    # 55 samples with 11 held out for validation leaves 44 < 50 for training
    assert data.eligible_query_classes(client, 50) == [1]


def test_manifest_lists_supports(synth):
    import json

    clients = data.partition(synth, data.PartitionSpec("pathological", 4, 2, seed=0))
    doc = json.loads(data.partition_manifest(clients))
    assert sorted(map(int, doc["0"])) == clients[0].local_classes
