import numpy as np

from itemmetric.data import load_interactions, load_manifest
from itemmetric.synthetic import make_archetype_dataset, make_cluster_dataset, write_bundled_dataset, write_dataset


def test_cluster_dataset_shape_and_determinism():
    a = make_cluster_dataset(seed=3)
    b = make_cluster_dataset(seed=3)
    assert len(a.catalog) == 400 and len(a.log.users()) == 50 and len(a.log) == 2000
    assert a.catalog.features.dims == (6, 10)
    assert np.array_equal(a.log.rating, b.log.rating) and list(a.log.item) == list(b.log.item)
    # clusters drive ratings: between-cluster spread dominates
    lab = np.array([a.labels[i] for i in a.log.item])
    means = np.array([a.log.rating[lab == c].mean() for c in range(8)])
    assert means.std() > 0.5


def test_archetype_groups():
    ds = make_archetype_dataset(seed=0)
    assert set(ds.user_groups.values()) == {"a", "b"}
    u = "u000"
    items = ds.log.for_user(u).items()
    lab = {ds.labels[i][0] for i in items}
    assert ds.user_groups[u] == "a" and len(lab) == 2


def test_write_and_reload(tmp_path):
    ds = make_cluster_dataset(n_items=30, n_users=4, events_per_user=5, seed=1)
    write_dataset(ds, tmp_path)
    log = load_interactions(tmp_path / "interactions.csv")
    assert np.array_equal(log.rating, ds.log.rating)
    chans = load_manifest(tmp_path / "manifest.csv")
    for ch, orig in zip(chans, ds.catalog.channels):
        assert ch.name == orig.name and ch.kind == orig.kind
        assert all(np.array_equal(ch.values[i], orig.values[i]) for i in ds.catalog.items)


def test_bundled(tmp_path):
    write_bundled_dataset(tmp_path)
    assert (tmp_path / "run.ini").is_file()
    shipped = __import__("pathlib").Path(__file__).resolve().parents[1] / "data" / "synthetic" / "interactions.csv"
    assert shipped.read_bytes() == (tmp_path / "interactions.csv").read_bytes()
