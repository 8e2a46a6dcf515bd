import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtail_lab.data import (
    DatasetError,
    DegenerateSpec,
    DomainDataset,
    ParseError,
    SchemaError,
    SynthSpec,
    class_frequencies,
    class_sizes,
    dumps_dataset,
    gen_synthetic,
    load_dataset_file,
    loads_dataset,
    save_dataset_file,
    split,
)

SMALL = SynthSpec(num_domains=3, num_classes=5, feature_dim=4, samples_per_class_max=40, seed=2)


def test_class_sizes_examples():
    assert class_sizes(100, 10, 5) == [100, 56, 32, 18, 10]
    assert class_sizes(37, 1, 4) == [37] * 4


def test_generated_counts_follow_profile():
    for d in gen_synthetic(SynthSpec(num_classes=5, samples_per_class_max=100, imbalance_ratio=10)):
        assert d.class_counts.tolist() == [100, 56, 32, 18, 10]
    rot = gen_synthetic(SynthSpec(num_classes=5, class_order="rotated"))
    assert rot[1].class_counts.tolist() == [10, 100, 56, 32, 18]


def test_generation_is_deterministic():
    a, b = gen_synthetic(SMALL), gen_synthetic(SMALL)
    assert all(x.same_samples(y) for x, y in zip(a, b))
    c = gen_synthetic(SynthSpec(**{**SMALL.__dict__, "seed": 3}))
    assert not a[0].same_samples(c[0])


def test_domains_differ_and_shapes():
    doms = gen_synthetic(SMALL)
    assert [d.name for d in doms] == ["dom0", "dom1", "dom2"]
    assert [d.domain_id for d in doms] == [0, 1, 2]
    assert all(d.x.shape == (len(d), 4) and np.all(np.isfinite(d.x)) for d in doms)
    assert not np.allclose(doms[0].x.mean(axis=0), doms[1].x.mean(axis=0))


def test_label_noise_changes_some_labels():
    clean = gen_synthetic(SMALL)[0]
    noisy = gen_synthetic(SynthSpec(**{**SMALL.__dict__, "label_noise": 0.2}))[0]
    frac = np.mean(clean.y != noisy.y)
    assert 0.05 < frac < 0.4


@pytest.mark.parametrize("kw", [dict(imbalance_ratio=0.5), dict(num_domains=1), dict(num_classes=1),
                                dict(label_noise=0.5), dict(class_order="x"), dict(domain_names=("a", "a", "b"))])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**{**SMALL.__dict__, **kw})


def test_degenerate_sizes():
    with pytest.raises(DegenerateSpec):
        gen_synthetic(SynthSpec(samples_per_class_max=10, imbalance_ratio=100))


def test_split_examples():
    d = DomainDataset(0, "d", np.zeros((100, 2)), np.repeat([0, 1], 50), 2)
    s = split(d, 0.9, 0)
    assert s.train_idx.size == 90 and s.val_idx.size == 10
    assert not set(s.train_idx) & set(s.val_idx)
    assert sorted(np.concatenate([s.train_idx, s.val_idx])) == list(range(100))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 0.95))
def test_split_is_stratified(seed, frac):
    d = gen_synthetic(SMALL)[seed % 3]
    s = split(d, frac, seed)
    for c, n in enumerate(d.class_counts):
        n_train = np.sum(d.y[s.train_idx] == c)
        assert abs(n_train - frac * n) <= 1
        assert 1 <= n_train < n
    assert not set(s.train_idx) & set(s.val_idx)
    assert np.array_equal(split(d, frac, seed).train_idx, s.train_idx)


def test_class_frequencies():
    d = DomainDataset(0, "d", np.zeros((30, 1)), np.repeat(np.arange(10), 3), 10)
    np.testing.assert_array_equal(class_frequencies(d), np.full(10, 0.1))
    one = DomainDataset(0, "d", np.zeros((4, 1)), np.full(4, 2), 3)
    np.testing.assert_array_equal(class_frequencies(one), [0.0, 0.0, 1.0])
    f = class_frequencies(split(gen_synthetic(SMALL)[0], 0.9))
    assert f.sum() == pytest.approx(1.0, abs=1e-15)


def test_round_trip(tmp_path):
    for d in gen_synthetic(SMALL):
        path = tmp_path / f"{d.name}.txt"
        save_dataset_file(d, path)
        back = load_dataset_file(path, d.domain_id, expected_classes=5, expected_dim=4)
        assert back.same_samples(d) and back.domain_id == d.domain_id


def test_comments_and_crlf_are_accepted():
    text = '# made by hand\n{"version":1,"domain":"a","C":2,"d":2,"n":2}\r\n1,0.5,2\r\n# mid\n0,1e-3,-4\n'
    d = loads_dataset(text)
    assert d.y.tolist() == [1, 0] and d.x.tolist() == [[0.5, 2.0], [1e-3, -4.0]]


def test_truncated_file_is_rejected(tmp_path):
    raw = dumps_dataset(gen_synthetic(SMALL)[0])
    cut = raw[: len(raw) // 2]
    with pytest.raises(ParseError) as err:
        loads_dataset(cut)
    assert err.value.line is not None


def test_schema_mismatch():
    raw = dumps_dataset(gen_synthetic(SMALL)[0])
    with pytest.raises(SchemaError):
        loads_dataset(raw, expected_classes=6)
    with pytest.raises(SchemaError):
        loads_dataset(raw, expected_dim=3)


@pytest.mark.parametrize("text", [
    "",
    "not json\n",
    '{"version":2,"domain":"a","C":2,"d":1,"n":0}\n',
    '{"version":1,"domain":"a","C":2,"d":1,"n":0,"extra":1}\n',
    '{"version":1,"domain":3,"C":2,"d":1,"n":0}\n',
    '{"version":1,"domain":"a","C":1,"d":1,"n":0}\n',
    '{"version":1,"domain":"a","C":2,"d":1,"n":1}\n2,0.5\n',
    '{"version":1,"domain":"a","C":2,"d":1,"n":1}\n0,nan\n',
    '{"version":1,"domain":"a","C":2,"d":1,"n":1}\n0,1,2\n',
    '{"version":1,"domain":"a","C":2,"d":1,"n":1}\nx,1\n',
    b'\xff\xfe',
])
def test_malformed_inputs(text):
    with pytest.raises(ParseError):
        loads_dataset(text)


@settings(max_examples=300)
@given(st.one_of(st.binary(max_size=200), st.text(max_size=200)))
def test_loading_is_total(raw):
    try:
        d = loads_dataset(raw)
    except DatasetError:
        return
    assert isinstance(d, DomainDataset)


@settings(max_examples=100)
@given(st.integers(2, 4), st.integers(1, 3), st.lists(st.tuples(st.integers(0, 3), st.floats(-1e6, 1e6)),
                                                       max_size=6))
def test_loading_valid_files(C, d, rows):
    rows = [(y % C, v) for y, v in rows]
    lines = [f'{{"version":1,"domain":"z","C":{C},"d":{d},"n":{len(rows)}}}']
    lines += [",".join([str(y)] + [repr(v)] * d) for y, v in rows]
    ds = loads_dataset("\n".join(lines) + "\n")
    assert len(ds) == len(rows) and ds.x.shape == (len(rows), d)
    assert loads_dataset(dumps_dataset(ds)).same_samples(ds)
