import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorweave import (
    MergeSpec,
    TaskVector,
    TensorMap,
    available_methods,
    axpy_sum,
    breadcrumbs,
    dare,
    fingerprint,
    magmax,
    registry_lookup,
    task_arithmetic,
    ties,
)

from .conftest import as_task_vectors, random_map
from . import oracles


def vecs(*rows):
    return as_task_vectors([TensorMap({"w": np.array(r, dtype=np.float32)}) for r in rows])


def arrays_equal(a: TensorMap, b: TensorMap) -> bool:
    return all(a.array(n).tobytes() == b.array(n).tobytes() for n in a)


# ---------------------------------------------------------------- MergeSpec


def test_spec_validation():
    MergeSpec("task_arithmetic", lam=0.5)
    with pytest.raises(ValueError, match="positive"):
        MergeSpec("task_arithmetic", lam=-1.0)
    with pytest.raises(ValueError, match="positive"):
        MergeSpec("task_arithmetic", lam=0.0)
    with pytest.raises(ValueError, match="drop_rate"):
        MergeSpec("dare", params={"drop_rate": 1.0})
    with pytest.raises(ValueError, match="drop_rate"):
        MergeSpec("dare")
    with pytest.raises(ValueError, match="keep_fraction"):
        MergeSpec("ties", params={"keep_fraction": 0.0})
    MergeSpec("ties", params={"keep_fraction": 1.0})
    with pytest.raises(ValueError, match="beta"):
        MergeSpec("breadcrumbs", params={"beta": 0.6, "gamma": 0.5})
    with pytest.raises(ValueError, match="seed"):
        MergeSpec("task_arithmetic", seed=-1)
    with pytest.raises(ValueError, match="does not accept"):
        MergeSpec("ties", params={"keep_fraction": 0.5, "beta": 0.1})


def test_spec_json_round_trip():
    spec = MergeSpec("dare", lam=0.7, params={"drop_rate": 0.5}, seed=9)
    payload = spec.to_json_dict()
    assert payload == {"method": "dare", "lambda": 0.7, "params": {"drop_rate": 0.5}, "seed": 9}


# ----------------------------------------------------------- task arithmetic


def test_ta_example():
    out = task_arithmetic(vecs([1.0, -2.0], [3.0, 0.0]), MergeSpec("task_arithmetic", lam=0.5))
    assert out.array("w").tolist() == [2.0, -1.0]


def test_ta_single_identity():
    deltas = vecs([0.25, -7.5, 3.0])
    out = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=1.0))
    assert arrays_equal(out, deltas[0].delta)


def test_ta_equals_unit_axpy():
    deltas = vecs([1.5, 2.5], [-0.5, 4.0], [2.0, -2.0])
    out = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=1.0))
    summed = axpy_sum([tv.delta for tv in deltas], [1.0, 1.0, 1.0])
    assert arrays_equal(out, summed)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-1, 1, width=32), min_size=4, max_size=4),
        min_size=1,
        max_size=3,
    ),
    st.floats(0.01, 1.5),
)
def test_ta_homogeneity(rows, lam):
    # unit-scale deltas and swept-range factors, where 1e-6 is > a float32 ulp
    deltas = vecs(*rows)
    scaled = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=lam)).array("w")
    unit = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=1.0)).array("w")
    np.testing.assert_allclose(scaled, lam * unit.astype(np.float64), atol=1e-6)


def test_ta_matches_oracle(rng):
    deltas = as_task_vectors([random_map(rng, {"a": (33,), "b": (2, 5)}) for _ in range(3)])
    out = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=0.37))
    for name in ("a", "b"):
        rows = [[float(x) for x in tv.delta.array(name).ravel()] for tv in deltas]
        expected = oracles.merge_ta(rows, 0.37)
        assert out.array(name).ravel().tolist() == expected


# ----------------------------------------------------------------------- dare


def test_dare_p0_is_ta_bitwise(rng):
    deltas = as_task_vectors([random_map(rng, {"a": (50,)}) for _ in range(3)])
    masked = dare(deltas, MergeSpec("dare", lam=0.8, params={"drop_rate": 0.0}, seed=99))
    plain = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=0.8))
    assert arrays_equal(masked, plain)


def test_dare_deterministic(rng):
    deltas = as_task_vectors([random_map(rng, {"a": (64,)}) for _ in range(2)])
    spec = MergeSpec("dare", lam=1.0, params={"drop_rate": 0.5}, seed=1234)
    assert arrays_equal(dare(deltas, spec), dare(deltas, spec))


def test_dare_seed_changes_mask(rng):
    deltas = as_task_vectors([random_map(rng, {"a": (256,)})])
    one = dare(deltas, MergeSpec("dare", params={"drop_rate": 0.5}, seed=1))
    two = dare(deltas, MergeSpec("dare", params={"drop_rate": 0.5}, seed=2))
    assert not arrays_equal(one, two)


def test_dare_drop_fraction_within_binomial_interval():
    scipy_stats = pytest.importorskip("scipy.stats")
    n = 100_000
    deltas = as_task_vectors([TensorMap({"w": np.ones(n, dtype=np.float32)})])
    p = 0.9
    out = dare(deltas, MergeSpec("dare", params={"drop_rate": p}, seed=31337))
    dropped = int((out.array("w") == 0).sum())
    low = scipy_stats.binom.ppf(0.0005, n, p)
    high = scipy_stats.binom.ppf(0.9995, n, p)
    assert low <= dropped <= high
    assert 0.894 <= dropped / n <= 0.906


def test_dare_survivors_rescaled():
    deltas = vecs([2.0] * 1000)
    out = dare(deltas, MergeSpec("dare", params={"drop_rate": 0.5}, seed=5)).array("w")
    survivors = out[out != 0]
    np.testing.assert_allclose(survivors, 4.0)


def test_dare_matches_oracle(rng):
    deltas = as_task_vectors([random_map(rng, {"x": (31,), "y": (8,)}) for _ in range(2)])
    spec = MergeSpec("dare", lam=0.6, params={"drop_rate": 0.4}, seed=77)
    out = dare(deltas, spec)
    for name in ("x", "y"):
        rows = [[float(v) for v in tv.delta.array(name).ravel()] for tv in deltas]
        expected = oracles.merge_dare(
            rows, 0.6, drop_rate=0.4, seed=77, tensor_name=name, task_indices=[1, 2]
        )
        assert out.array(name).ravel().tolist() == expected


# ----------------------------------------------------------------------- ties


def test_ties_hand_traced_example():
    out = ties(
        vecs([2.0, -1.0], [-3.0, -1.0]),
        MergeSpec("ties", lam=1.0, params={"keep_fraction": 1.0}),
    )
    assert out.array("w").tolist() == [-3.0, -1.0]


def test_ties_single_task_keep_all_is_scaled_delta():
    deltas = vecs([0.1, -0.7, 0.0, 5.0])
    lam = 0.3
    out = ties(deltas, MergeSpec("ties", lam=lam, params={"keep_fraction": 1.0}))
    expected = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=lam))
    assert arrays_equal(out, expected)


def test_ties_trim_keeps_largest():
    out = ties(vecs([4.0, -1.0]), MergeSpec("ties", lam=1.0, params={"keep_fraction": 0.5}))
    assert out.array("w").tolist() == [4.0, 0.0]


def test_ties_trim_tie_break_lower_index():
    # all equal magnitudes: keep ceil(0.5*4)=2, lowest flat indices first
    out = ties(vecs([1.0, -1.0, 1.0, -1.0]), MergeSpec("ties", lam=1.0, params={"keep_fraction": 0.5}))
    assert out.array("w").tolist() == [1.0, -1.0, 0.0, 0.0]


def test_ties_matches_oracle(rng):
    for _ in range(20):
        rows = [
            [rng.choice([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]) for _ in range(9)]
            for _ in range(rng.randint(1, 4))
        ]
        k = rng.choice([0.2, 0.34, 0.5, 0.75, 1.0])
        lam = rng.choice([0.1, 0.7, 1.0, 1.5])
        out = ties(vecs(*rows), MergeSpec("ties", lam=lam, params={"keep_fraction": k}))
        assert out.array("w").tolist() == oracles.merge_ties(rows, lam, keep_fraction=k)


def test_ties_trim_dominance(rng):
    # every kept element dominates every dropped one under (|v|, -index) order
    row = [float(np.float32(rng.uniform(-3, 3))) for _ in range(12)]
    keep = int(np.ceil(0.4 * 12 - 1e-9))
    order = sorted(range(12), key=lambda i: (-abs(row[i]), i))
    kept, dropped = order[:keep], order[keep:]
    trimmed = oracles.trim_keep_top(row, keep)
    assert [trimmed[i] for i in kept] == [row[i] for i in kept]
    assert all(trimmed[i] == 0.0 for i in dropped)
    for ki in kept:
        for di in dropped:
            assert abs(row[ki]) > abs(row[di]) or (abs(row[ki]) == abs(row[di]) and ki < di)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-10, 10, width=32), min_size=6, max_size=6),
        min_size=1,
        max_size=4,
    ),
    st.sampled_from([0.25, 0.5, 1.0]),
)
def test_ties_sign_safety(rows, k):
    deltas = vecs(*rows)
    out = ties(deltas, MergeSpec("ties", lam=1.0, params={"keep_fraction": k})).array("w")
    expected = oracles.merge_ties(rows, 1.0, keep_fraction=k)
    assert out.tolist() == expected
    # recompute elected signs independently and check every nonzero output
    keep = max(1, int(np.ceil(k * 6 - 1e-9)))
    trimmed = [oracles.trim_keep_top([np.float32(v) for v in row], keep) for row in rows]
    for p in range(6):
        elected = np.sign(sum(t[p] for t in trimmed))
        if out[p] != 0:
            assert np.sign(out[p]) == elected
        if all(t[p] == 0 for t in trimmed):
            assert out[p] == 0


# ---------------------------------------------------------------- breadcrumbs


def test_breadcrumbs_zero_masks_is_ta_bitwise(rng):
    deltas = as_task_vectors([random_map(rng, {"a": (21,)}) for _ in range(3)])
    masked = breadcrumbs(deltas, MergeSpec("breadcrumbs", lam=0.9, params={"beta": 0.0, "gamma": 0.0}))
    plain = task_arithmetic(deltas, MergeSpec("task_arithmetic", lam=0.9))
    assert arrays_equal(masked, plain)


def test_breadcrumbs_example():
    out = breadcrumbs(
        vecs([1.0, -5.0, 2.0, 0.1]),
        MergeSpec("breadcrumbs", lam=1.0, params={"beta": 0.25, "gamma": 0.25}),
    )
    assert out.array("w").tolist() == [1.0, 0.0, 2.0, 0.0]


def test_breadcrumbs_equal_magnitudes_drop_count():
    out = breadcrumbs(
        vecs([1.0] * 10),
        MergeSpec("breadcrumbs", lam=1.0, params={"beta": 0.5, "gamma": 0.0}),
    ).array("w")
    assert int((out == 0).sum()) == 5
    # ties on the small side drop the lower flat indices first
    assert out.tolist() == [0.0] * 5 + [1.0] * 5


def test_breadcrumbs_equal_magnitudes_large_side():
    out = breadcrumbs(
        vecs([2.0] * 6),
        MergeSpec("breadcrumbs", lam=1.0, params={"beta": 0.0, "gamma": 0.5}),
    ).array("w")
    # ties on the large side drop the higher flat indices first
    assert out.tolist() == [2.0] * 3 + [0.0] * 3


def test_breadcrumbs_matches_oracle(rng):
    for _ in range(20):
        rows = [[rng.uniform(-4, 4) for _ in range(11)] for _ in range(rng.randint(1, 3))]
        rows = [[float(np.float32(v)) for v in row] for row in rows]
        beta = rng.choice([0.0, 0.2, 0.45])
        gamma = rng.choice([0.0, 0.2, 0.45])
        lam = rng.choice([0.5, 1.0])
        out = breadcrumbs(
            vecs(*rows), MergeSpec("breadcrumbs", lam=lam, params={"beta": beta, "gamma": gamma})
        )
        assert out.array("w").tolist() == oracles.merge_breadcrumbs(rows, lam, beta=beta, gamma=gamma)


# -------------------------------------------------------------------- magmax


def test_magmax_example():
    out = magmax(vecs([1.0, -2.0], [3.0, 0.0]), MergeSpec("magmax", lam=0.5))
    assert out.array("w").tolist() == [1.5, -1.0]


def test_magmax_single_task():
    deltas = vecs([4.0, -0.5])
    out = magmax(deltas, MergeSpec("magmax", lam=1.0))
    assert arrays_equal(out, deltas[0].delta)


def test_magmax_tie_takes_smallest_index():
    out = magmax(vecs([1.0], [-1.0]), MergeSpec("magmax", lam=1.0))
    assert out.array("w").tolist() == [1.0]


def test_magmax_matches_oracle(rng):
    rows = [[rng.uniform(-2, 2) for _ in range(25)] for _ in range(4)]
    rows = [[float(np.float32(v)) for v in row] for row in rows]
    out = magmax(vecs(*rows), MergeSpec("magmax", lam=0.85))
    assert out.array("w").tolist() == oracles.merge_magmax(rows, 0.85)


def test_magmax_index_map_scaling_invariance(rng):
    # power-of-two scaling is exact in float32, so selection cannot move
    rows = [[rng.uniform(-8, 8) for _ in range(40)] for _ in range(3)]
    base = [np.array(row, dtype=np.float32) for row in rows]
    for c in (0.5, 2.0, 4.0):
        scaled = [c * row for row in base]
        index_base = np.argmax(np.abs(np.stack(base)), axis=0)
        index_scaled = np.argmax(np.abs(np.stack(scaled)), axis=0)
        np.testing.assert_array_equal(index_base, index_scaled)
        out = magmax(
            as_task_vectors([TensorMap({"w": row}) for row in scaled]),
            MergeSpec("magmax", lam=1.0),
        ).array("w")
        chosen = np.stack(scaled)[index_base, np.arange(40)]
        np.testing.assert_array_equal(out, chosen)


# ------------------------------------------------------------------ registry


def test_registry_lookups():
    assert registry_lookup("ties") is ties
    assert registry_lookup("task_arithmetic") is task_arithmetic
    assert available_methods() == ["breadcrumbs", "dare", "magmax", "task_arithmetic", "ties"]


def test_registry_unknown_lists_available():
    with pytest.raises(ValueError, match="pcb") as excinfo:
        registry_lookup("pcb")
    message = str(excinfo.value)
    for name in available_methods():
        assert name in message


# --------------------------------------------------------- shared invariants


@pytest.mark.parametrize(
    "method,params",
    [
        ("task_arithmetic", {}),
        ("dare", {"drop_rate": 0.3}),
        ("ties", {"keep_fraction": 0.5}),
        ("breadcrumbs", {"beta": 0.2, "gamma": 0.2}),
        ("magmax", {}),
    ],
)
def test_fingerprint_preserved_and_deterministic(rng, method, params):
    deltas = as_task_vectors([random_map(rng, {"a": (3, 4), "b": (7,)}) for _ in range(3)])
    spec = MergeSpec(method, lam=0.7, params=params, seed=11)
    fn = registry_lookup(method)
    out1, out2 = fn(deltas, spec), fn(deltas, spec)
    assert fingerprint(out1) == fingerprint(deltas[0].delta)
    assert arrays_equal(out1, out2)


def test_merge_rejects_empty_and_mismatched(rng):
    spec = MergeSpec("task_arithmetic")
    with pytest.raises(ValueError):
        task_arithmetic([], spec)
    good = as_task_vectors([random_map(rng, {"a": (4,)})])
    bad = as_task_vectors([random_map(rng, {"a": (5,)})])
    from tensorweave import FingerprintMismatch

    with pytest.raises(FingerprintMismatch):
        task_arithmetic([good[0], bad[0]], spec)
