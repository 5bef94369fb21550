import logging

import numpy as np
import pytest

from tdrcl.core import ConfigError, DomainError, PairSpace
from tdrcl.datasets import (ParseError, RatingFileSpec, SplitDataset, Triples, load_matrix,
                            load_triples, make_split, scale_ratings, synthetic_split)


def test_matrix_examples(tmp_path):
    f = tmp_path / "m.ascii"
    f.write_text("0 3\n5 0\n")
    assert load_matrix(f).as_set() == {(0, 1, 3.0), (1, 0, 5.0)}
    f.write_text("0 0\n0 0\n")
    assert len(load_matrix(f)) == 0


@pytest.mark.parametrize("text, where", [("1 2\n3\n", ":2:"), ("1 x\n", ":1:"), ("1 9\n", ":1:")])
def test_matrix_errors(tmp_path, text, where):
    f = tmp_path / "m.ascii"
    f.write_text(text)
    with pytest.raises(ParseError, match=where):
        load_matrix(f)


def test_triples_examples(tmp_path, caplog):
    f = tmp_path / "t.txt"
    f.write_text("u1 i1 4\nu2 i1 2\nu1 i2 5\n")
    tr, ids, dupes = load_triples(f)
    assert len(tr) == 3 and dupes == 0
    assert ids.users == ["u1", "u2"] and ids.items == ["i1", "i2"]
    f.write_text("1,10,3\n1,10,5\n2,10,1\n")
    with caplog.at_level(logging.WARNING):
        tr, _, dupes = load_triples(f, RatingFileSpec(delimiter=","))
    assert dupes == 1 and "duplicate" in caplog.text
    assert tr.as_set() == {(0, 0, 5.0), (1, 0, 1.0)}


def test_triples_malformed(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("1 2 3\n1 2\n")
    with pytest.raises(ParseError, match=":2:"):
        load_triples(f)
    f.write_text("1 2 abc\n")
    with pytest.raises(ParseError, match=":1:"):
        load_triples(f)


def _triples(n, gen, n_users=20, n_items=30):
    keys = gen.choice(n_users * n_items, n, replace=False)
    return Triples(keys // n_items, keys % n_items, gen.integers(1, 6, n))


def test_split_examples():
    gen = np.random.default_rng(0)
    mnar = _triples(100, gen)
    mar = Triples([19], [29], [3])
    mnar = mnar.take(mnar.keys(PairSpace(20, 30)) != 19 * 30 + 29)
    a = make_split(mnar, mar, 0.1, seed=4, space=PairSpace(20, 30))
    assert len(a.train) + len(a.val) == len(mnar)
    assert len(a.val) == round(0.1 * len(mnar))
    b = make_split(mnar, mar, 0.1, seed=4, space=PairSpace(20, 30))
    assert a.val.as_set() == b.val.as_set()
    c = make_split(mnar, mar, 0.1, seed=5, space=PairSpace(20, 30))
    assert a.val.as_set() != c.val.as_set()


def test_split_errors_and_overlap():
    gen = np.random.default_rng(1)
    mnar = _triples(50, gen)
    with pytest.raises(ConfigError):
        make_split(mnar, mnar, 0.0)
    with pytest.raises(DomainError):
        make_split(mnar, Triples([], [], []), 0.1)
    split = make_split(mnar, mnar.take(slice(0, 5)), 0.1, space=PairSpace(20, 30))
    assert split.meta["dropped_overlap"] == 5
    test_keys = set(split.test.keys(split.space).tolist())
    assert not test_keys & set(split.train.keys(split.space).tolist())


def test_scaling_and_eval_set():
    np.testing.assert_allclose(scale_ratings([1, 3, 5]), [0, 0.5, 1])
    split = synthetic_split(40, 50, seed=0)
    ev = split.eval_set("test")
    assert set(np.unique(ev.labels)) <= {0.0, 1.0}
    assert ev.scaled.min() >= 0 and ev.scaled.max() <= 1


def test_synthetic_split_is_mnar():
    split = synthetic_split(seed=0)
    # exposure favours high ratings, so the training mean exceeds the randomised test mean
    assert split.train.ratings.mean() > split.test.ratings.mean() + 0.3
    assert len(split.test) == 200 * 16
    o = split.exposure()
    assert not o[split.test.users, split.test.items].any()


def test_split_roundtrip(tmp_path):
    split = synthetic_split(30, 40, seed=2)
    split.save(tmp_path / "s.bin")
    back = SplitDataset.load(tmp_path / "s.bin")
    for part in ("train", "val", "test"):
        assert getattr(back, part).as_set() == getattr(split, part).as_set()
    assert back.meta == split.meta
