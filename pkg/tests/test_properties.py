"""Randomised invariants (hypothesis) across geometry, masking, losses, retrieval and codecs."""

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poma import dataset, formats, geometry, losses, masking, retrieval
from poma.geometry import CameraModel
from poma.retrieval import SceneIndex

import oracles

FAST = settings(max_examples=40, deadline=None)
finite = st.floats(-50, 50, allow_nan=False, width=64)


@st.composite
def cameras(draw):
    q = draw(arrays(np.float64, (4,), elements=st.floats(-1, 1)))
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    f = draw(st.floats(5, 200))
    return CameraModel(f, f * draw(st.floats(0.8, 1.25)), draw(st.floats(0, 64)), draw(st.floats(0, 64)),
                       R, draw(arrays(np.float64, (3,), elements=st.floats(-10, 10))))


@FAST
@given(cam=cameras(), depth=arrays(np.float64, (4, 5), elements=st.floats(0.05, 50)))
def test_unproject_project_round_trip(cam, depth):
    pm = geometry.unproject(depth, cam)
    uvd = geometry.project_many(pm.reshape(-1, 3), cam)
    v, u = np.mgrid[0:4, 0:5]
    ref = np.stack([u.ravel(), v.ravel(), depth.ravel()], axis=1)
    assert np.abs(uvd - ref).max() < 1e-6
    np.testing.assert_allclose(pm, oracles.unproject_loop(depth, cam.K, cam.R, cam.t), atol=1e-9)


@FAST
@given(pts=arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=finite),
       cell=st.floats(0.05, 5), seed=st.integers(0, 2**16))
def test_voxels_ignore_order_and_duplicates(pts, cell, seed):
    rng = np.random.default_rng(seed)
    shuffled = np.concatenate([pts, pts[: len(pts) // 2]])[rng.permutation(len(pts) + len(pts) // 2)]
    assert geometry.voxel_coverage(pts, cell) == geometry.voxel_coverage(shuffled, cell)


@FAST
@given(sets=st.lists(st.sets(st.integers(0, 15), max_size=8), min_size=1, max_size=6),
       n=st.integers(1, 6))
def test_greedy_cover_monotone(sets, n):
    chosen = dataset.greedy_cover(sets, n)
    assert chosen == oracles.greedy_cover_exhaustive(sets, n)
    sizes = [len(set().union(*(sets[i] for i in chosen[:k + 1]))) for k in range(len(chosen))]
    assert sizes == sorted(sizes)
    assert sizes[-1] >= max(len(s) for s in sets)


@FAST
@given(n_views=st.integers(0, 4), gh=st.integers(1, 8), gw=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_partition_invariants(n_views, gh, gw, seed):
    part = masking.sample_partition(n_views, gh, gw, np.random.default_rng(seed))
    masked, visible = set(part.masked), set(part.visible)
    assert not masked & visible
    assert len(masked | visible) == n_views * gh * gw
    assert list(part.masked) == sorted(masked) and list(part.visible) == sorted(visible)
    for v in range(n_views):
        rows = {r for vv, r, _ in part.masked if vv == v}
        cols = {c for vv, _, c in part.masked if vv == v}
        assert len([k for k in part.masked if k[0] == v]) == len(rows) * len(cols)  # one rectangle


@FAST
@given(n=st.integers(1, 8), d=st.integers(2, 6), tau=st.floats(0.05, 5), seed=st.integers(0, 2**16))
def test_info_nce_oracle(n, d, tau, seed):
    g = torch.Generator().manual_seed(seed)
    za = torch.nn.functional.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)
    zb = torch.nn.functional.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)
    value = losses.info_nce(za, zb, tau).item()
    assert abs(value - oracles.info_nce_bruteforce(za.numpy(), zb.numpy(), tau)) < 1e-10
    # swapping sides reorders the float sums, so symmetry holds to a few ulps
    assert abs(value - losses.info_nce(zb, za, tau).item()) <= 1e-12 * max(1.0, value)


@FAST
@given(a=arrays(np.float64, st.tuples(st.integers(1, 16), st.just(3)), elements=st.floats(-5, 5)),
       b=arrays(np.float64, st.tuples(st.integers(1, 16), st.just(3)), elements=st.floats(-5, 5)),
       seed=st.integers(0, 2**16))
def test_chamfer_oracle_and_permutations(a, b, seed):
    rng = np.random.default_rng(seed)
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    value = losses.chamfer_jepa(ta, tb).item()
    assert abs(value - oracles.chamfer_bruteforce(a, b)) <= 1e-10 * max(1.0, value)
    pa, pb = rng.permutation(len(a)), rng.permutation(len(b))
    assert abs(losses.chamfer_jepa(ta[pa], tb[pb]).item() - value) <= 1e-12 * max(1.0, value)
    assert value >= 0


@FAST
@given(embs=arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.floats(-1, 1)),
       query=arrays(np.float64, (4,), elements=st.floats(-1, 1)), seed=st.integers(0, 2**16))
def test_retrieve_insertion_order_and_recall_monotone(embs, query, seed):
    ids = [f"s{i}" for i in range(len(embs))]
    a, b = SceneIndex(4), SceneIndex(4)
    for i in range(len(embs)):
        a.add(ids[i], embs[i][None])
    for i in np.random.default_rng(seed).permutation(len(embs)):
        b.add(ids[i], embs[i][None])
    n = len(embs)
    assert retrieval.retrieve(query, a, n) == retrieval.retrieve(query, b, n)
    qs = [retrieval.RetrievalQuery(["t"], query, sid) for sid in ids]
    recalls = [retrieval.recall_at(qs, a, 1, k) for k in range(1, n + 1)]
    assert recalls == sorted(recalls) and recalls[-1] == 1.0


@FAST
@given(pm=arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
                 elements=st.floats(-1e6, 1e6, width=32) | st.just(np.nan)))
def test_point_map_codec(pm):
    back = formats.decode_point_map(formats.encode_point_map(pm))
    assert back.tobytes() == pm.astype("<f4").tobytes()


@FAST
@given(texts=st.lists(st.text(alphabet="abcdefgh ", min_size=1, max_size=20)
                      .filter(lambda t: t.strip()), min_size=1, max_size=5))
def test_embed_unit_norm(texts):
    enc = dataset.ReferenceEncoder(32, 1)
    for t in texts:
        assert abs(np.linalg.norm(dataset.embed_text(enc, t)) - 1.0) < 1e-6
