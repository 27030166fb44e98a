import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from placetext.errors import BuildError, FormatError, ShapeError
from placetext.numerics import make_rng
from placetext.retrieval import (
    DescriptorIndex,
    RetrievalResult,
    build_index,
    knn,
    knn_batch,
    load_index,
    read_descriptors,
    save_index,
    write_descriptors,
)


def random_index(seed, n, dim, ties=0):
    rng = make_rng(seed)
    vecs = rng.standard_normal((n, dim)).astype(np.float32)
    ids = [f"img{i:05d}" for i in rng.permutation(n)]
    for t in range(ties):
        # copy a row under another id to force exact distance ties
        vecs[n - 1 - t] = vecs[t]
    return build_index(zip(ids, vecs)), ids, vecs


def test_empty_index():
    index = build_index([])
    assert len(index) == 0
    assert knn(index, [1.0, 2.0], 3).candidates == ()


def test_build_small_and_errors():
    index = build_index([("a", [1, 2, 3, 4]), ("b", [0, 0, 0, 0]), ("c", [1, 1, 1, 1])])
    assert len(index) == 3 and index.dim == 4
    with pytest.raises(BuildError):
        build_index([("a", [1, 2]), ("b", [1, 2, 3])])
    with pytest.raises(BuildError):
        build_index([("a", [1, 2]), ("a", [3, 4])])
    with pytest.raises(BuildError):
        build_index([("a", [np.nan, 1.0])])


def test_index_is_immutable():
    index = build_index([("a", [1.0, 2.0])])
    with pytest.raises(ValueError):
        index.vectors[0, 0] = 5.0


def test_exact_match_first():
    index, ids, vecs = random_index(0, 50, 8)
    res = knn(index, vecs[17], 3)
    assert res.candidates[0].id == ids[17]
    assert res.candidates[0].distance == 0.0


def test_k_saturates():
    index, ids, vecs = random_index(1, 7, 4)
    res = knn(index, np.zeros(4), 50)
    assert len(res.candidates) == 7
    want, _ = oracles.knn_order(ids, vecs, np.zeros(4))
    assert res.ids == want


def test_knn_errors():
    index, _, _ = random_index(2, 5, 4)
    with pytest.raises(ShapeError):
        knn(index, np.zeros(3), 1)
    with pytest.raises(ShapeError):
        knn(index, np.zeros(4), 0)


def test_ties_break_on_ascending_id():
    v = [1.0, 0.0]
    index = build_index([("c", v), ("a", v), ("b", v), ("z", [5.0, 5.0])])
    assert knn(index, [0.0, 0.0], 3).ids == ["a", "b", "c"]


@pytest.mark.parametrize("screen", [False, True])
def test_matches_full_sort_oracle(screen):
    index, ids, vecs = random_index(3, 300, 12, ties=20)
    rng = make_rng(4)
    for qi in range(10):
        q = rng.standard_normal(12) if qi % 2 else vecs[qi].astype(np.float64)
        want_ids, want_d = oracles.knn_order(ids, vecs, q)
        for k in (1, 5, 10, 100):
            res = knn(index, q, k, screen=screen)
            assert res.ids == want_ids[:k]
            np.testing.assert_allclose([c.distance for c in res.candidates], want_d[:k], rtol=1e-12, atol=1e-12)


def test_screening_keeps_near_ties():
    """Rows that differ from the k-th by less than float32 resolution must still be re-scored exactly."""
    base = np.ones(64, dtype=np.float32)
    rows = [base.copy() for _ in range(30)]
    for i, r in enumerate(rows):
        r[i % 64] += np.float32(1e-6) * (i % 5)
    index = build_index((f"r{i:02d}", r) for i, r in enumerate(rows))
    q = np.zeros(64)
    ids = [f"r{i:02d}" for i in range(30)]
    for k in (1, 3, 7):
        assert knn(index, q, k, screen=True).ids == oracles.knn_order(ids, rows, q)[0][:k]


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 6), st.integers(1, 50))
def test_distances_sorted_and_recomputed(seed, n, dim, k):
    index, ids, vecs = random_index(seed, n, dim, ties=min(3, n // 2))
    q = make_rng(seed + 1).standard_normal(dim)
    res = knn(index, q, k)
    d = [c.distance for c in res.candidates]
    assert len(d) == min(k, n)
    assert all(a <= b for a, b in zip(d, d[1:]))
    for c in res.candidates:
        assert abs(c.distance - float(np.linalg.norm(index.vector(c.id) - q))) < 1e-6


def test_cosine_order_agrees_on_normalised_inputs():
    rng = make_rng(5)
    vecs = rng.standard_normal((200, 16))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    index = build_index((f"i{j:03d}", v) for j, v in enumerate(vecs))
    q = rng.standard_normal(16)
    q /= np.linalg.norm(q)
    stored = index.vectors.astype(np.float64)
    cos = stored @ q / np.linalg.norm(stored, axis=1)
    order = [f"i{j:03d}" for j in np.argsort(-cos, kind="stable")[:20]]
    assert knn(index, q, 20).ids == order


def test_concurrent_queries_match_serial():
    index, _, _ = random_index(6, 500, 16)
    qs = make_rng(7).standard_normal((40, 16))
    serial = [knn(index, q, 10, str(i)) for i, q in enumerate(qs)]
    with ThreadPoolExecutor(8) as pool:
        parallel = list(pool.map(lambda p: knn(index, p[1], 10, str(p[0])), enumerate(qs)))
    assert parallel == serial
    assert knn_batch(index, qs, 10, [str(i) for i in range(40)], threads=4) == serial


def test_result_json_round_trip():
    index, _, _ = random_index(8, 20, 4)
    res = knn(index, np.ones(4), 5, "q1")
    assert RetrievalResult.from_json(json.loads(json.dumps(res.to_json()))) == res


def test_save_load_round_trip(tmp_path):
    index, _, _ = random_index(9, 1000, 32)
    path = tmp_path / "i.tipix"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded == index
    save_index(loaded, tmp_path / "j.tipix")
    assert (tmp_path / "j.tipix").read_bytes() == path.read_bytes()


def test_file_size_arithmetic_at_database_scale(tmp_path):
    n, dim = 8540, 8
    ids = [f"maze/floor{i % 5}/{i:06d}.jpg" for i in range(n)]
    vecs = make_rng(10).standard_normal((n, dim)).astype(np.float32)
    index = DescriptorIndex(ids, vecs)
    path = tmp_path / "big.tipix"
    save_index(index, path)
    id_table = sum(4 + len(i.encode()) for i in ids)
    assert path.stat().st_size == 21 + id_table + n * dim * 4
    assert load_index(path) == index


def test_unicode_ids_round_trip(tmp_path):
    index = build_index([("büro-304", [1.0]), ("教室", [2.0])])
    save_index(index, tmp_path / "u.tipix")
    assert load_index(tmp_path / "u.tipix").ids == ("büro-304", "教室")


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"TIPIY" + b[5:],
        lambda b: b[:5] + (9).to_bytes(4, "little") + b[9:],
        lambda b: b[:12],
        lambda b: b[:-3],
        lambda b: b + b"\x00",
        lambda b: b[:9] + (10**6).to_bytes(8, "little") + b[17:],
    ],
)
def test_corruption_rejected(tmp_path, mutate):
    index, _, _ = random_index(11, 10, 4)
    path = tmp_path / "i.tipix"
    save_index(index, path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        load_index(path)


def test_descriptor_payload(tmp_path):
    vecs = make_rng(12).standard_normal((6, 5)).astype(np.float32)
    write_descriptors(tmp_path / "d.bin", vecs)
    np.testing.assert_array_equal(read_descriptors(tmp_path / "d.bin", 6), vecs)
    with pytest.raises(FormatError):
        read_descriptors(tmp_path / "d.bin", 7)
    with pytest.raises(FormatError):
        read_descriptors(tmp_path / "d.bin", 0)
