import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirlab.errors import EmptyGallery, InvalidRecord, MissingSubset
from cirlab.evaluation import (Gallery, MetricsReport, QueryRecord, average_precision_at_k,
                               format_table, load_circo, load_cirr, load_fashioniq,
                               load_queries, map_at_k, rank_candidates, recall_at_k,
                               score_features, subset_recall_at_k)


def q(ref, gts, subset=None, text=""):
    return QueryRecord(ref, text, frozenset(gts), subset)


def test_rank_single_candidate():
    g = Gallery(["x"], [[1.0, 0.0]])
    assert rank_candidates([0.0, 1.0], g) == ["x"]


def test_rank_exact_match_first():
    g = Gallery(["a", "b", "c"], np.eye(3))
    assert rank_candidates([0, 1, 0], g)[0] == "b"


def test_rank_excludes_and_errors():
    g = Gallery(["a"], [[1.0]])
    with pytest.raises(EmptyGallery):
        rank_candidates([1.0], g, exclude={"a"})


def test_rank_ties_by_id():
    g = Gallery(["c", "a", "b"], [[1, 0], [1, 0], [0, 1]])
    assert rank_candidates([1, 0], g) == ["a", "c", "b"]


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_rank_matches_full_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((10, 4))
    ids = [f"g{i}" for i in range(10)]
    query = rng.standard_normal(4)
    unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    scores = unit @ (query / np.linalg.norm(query))
    oracle = [i for _, i in sorted(zip(-scores, ids))]
    assert rank_candidates(query, Gallery(ids, vecs)) == oracle


def test_recall_examples():
    qs = [q("r1", ["a"]), q("r2", ["b"])]
    assert recall_at_k([["a", "x"], ["b", "y"]], qs, 1) == 1.0
    assert recall_at_k([["x", "a"], ["y", "b"]], qs, 1) == 0.0


def test_recall_counting_oracle():
    rng = np.random.default_rng(1)
    ids = [f"i{n}" for n in range(10)]
    qs, ranks = [], []
    for n in range(10):
        perm = list(rng.permutation(ids))
        qs.append(q(f"ref{n}", [ids[n]]))
        ranks.append(perm)
    for k in (1, 3, 5):
        expected = sum(ids[n] in ranks[n][:k] for n in range(10)) / 10
        assert recall_at_k(ranks, qs, k) == expected


def test_ap_examples():
    assert average_precision_at_k(["a", "b"], {"a"}, 5) == 1.0
    assert average_precision_at_k(["a", "x", "b", "y", "z"], {"a", "b"}, 5) == pytest.approx(
        0.5 * (1 + 2 / 3))
    assert average_precision_at_k(list("abc"), set("abcdefg"), 3) == 1.0


def test_subset_recall():
    g = Gallery([f"m{i}" for i in range(6)], np.eye(6))
    members = tuple(f"m{i}" for i in range(6))
    queries = [q("m0", ["m3"], members)]
    feat = np.eye(6)[[3]] + 0.01
    assert subset_recall_at_k(queries, feat, g, 1) == 1.0
    bad = np.eye(6)[[2]]
    assert subset_recall_at_k(queries, bad, g, 1) == 0.0
    assert subset_recall_at_k(queries, bad, g, 5) == 1.0
    with pytest.raises(MissingSubset):
        subset_recall_at_k([q("m0", ["m3"])], feat, g, 1)


def test_query_record_invariants():
    with pytest.raises(InvalidRecord):
        q("a", ["a"])
    with pytest.raises(InvalidRecord):
        q("a", ["b"], ("c", "b"))
    with pytest.raises(InvalidRecord):
        q("a", ["b"], ("a", "c"))
    rec = q("a", ["b", "c"], ("a", "b"), "t")
    assert QueryRecord.from_record(rec.to_record()) == rec


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    ids = [f"g{i}" for i in range(12)]
    vecs = rng.standard_normal((12, 5))
    g = Gallery(ids, vecs)
    qs = [q(f"r{n}", rng.choice(ids, rng.integers(1, 4), replace=False)) for n in range(6)]
    feats = rng.standard_normal((6, 5))
    rep = score_features(feats, qs, g)
    rec = [rep.recall[k] for k in sorted(rep.recall)]
    assert rec == sorted(rec)
    assert all(0 <= v <= 1 for v in rep.map.values())
    single = [QueryRecord(x.reference_id, "", frozenset([sorted(x.ground_truth_ids)[0]]))
              for x in qs]
    ranks = [rank_candidates(f, g) for f in feats]
    assert recall_at_k(ranks, single, 1) == map_at_k(ranks, single, 1)


def test_format_table():
    rep = MetricsReport(1, recall={1: 0.5, 5: 1.0})
    text = format_table([("1", rep)], label="Token num")
    lines = text.splitlines()
    assert lines[0].split() == ["Token", "num", "R@1", "R@5", "Avg"]
    assert lines[2].split() == ["1", "50.00", "100.00", "75.00"]


def test_generic_loader(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_text(json.dumps({"reference_id": "a", "query_text": "x",
                             "ground_truth_ids": ["b"]}) + "\n")
    assert load_queries(p) == [q("a", ["b"], text="x")]


def test_cirr_loader(tmp_path):
    p = tmp_path / "cap.rc2.val.json"
    p.write_text(json.dumps([{"pairid": 1, "reference": "r", "target_hard": "t",
                              "target_soft": {"t": 1.0}, "caption": "make it red",
                              "img_set": {"id": 3, "members": ["r", "t", "u"]}}]))
    (rec,) = load_cirr(p)
    assert rec == q("r", ["t"], ("r", "t", "u"), "make it red")
    p.write_text(json.dumps([{"pairid": 1, "reference": "r", "caption": "x"}]))
    with pytest.raises(InvalidRecord):
        load_cirr(p)


def test_circo_loader(tmp_path):
    p = tmp_path / "val.json"
    p.write_text(json.dumps([{"id": 0, "reference_img_id": 12, "target_img_id": 5,
                              "relative_caption": "has two dogs", "shared_concept": "dog",
                              "gt_img_ids": [5, 7]}]))
    (rec,) = load_circo(p)
    assert rec.ground_truth_ids == {"5", "7"} and rec.reference_id == "12"


def test_fashioniq_loader(tmp_path):
    p = tmp_path / "cap.dress.val.json"
    p.write_text(json.dumps([{"target": "t1", "candidate": "c1",
                              "captions": ["is red", "has sleeves."]}]))
    (rec,) = load_fashioniq(p)
    assert rec.query_text == "is red and has sleeves" and rec.reference_id == "c1"
