import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_abe.errors import ValidationError
from canopy_abe.metrics import (
    DENSITY_BINS,
    PERCENTILES,
    compute_metrics,
    metric_names,
    name_order,
    read_metric_csv,
    write_metric_csv,
)
from canopy_abe.pointcloud_io import PointCloud

from oracles import brute_metrics, percentile_type7


def normalized(z, rn=None, nr=None):
    n = len(z)
    rn = [1] * n if rn is None else rn
    nr = [1] * n if nr is None else nr
    return PointCloud(np.zeros(n), np.zeros(n), z, rn, nr, normalized=True)


@st.composite
def returns(draw, max_size=50, lo=-1.0, hi=35.0):
    n = draw(st.integers(0, max_size))
    nr = draw(st.lists(st.integers(1, 4), min_size=n, max_size=n))
    rn = [draw(st.integers(1, k)) for k in nr]
    # a coarse grid of heights makes ties and exact-threshold hits common
    z = draw(st.lists(st.one_of(st.floats(lo, hi, allow_nan=False),
                                st.integers(int(lo), int(hi)).map(float)),
                      min_size=n, max_size=n))
    return z, rn, nr


def close(a, b):
    return abs(a - b) <= 1e-12 * max(abs(a), abs(b)) + 1e-12


# -- names ----------------------------------------------------------------------


def test_name_list():
    names = metric_names()
    assert len(names) == 89 == 2 * 2 * (13 + 9) + 1
    assert names[0] == "zmean_f"
    assert "zp50_2m_l" in names
    assert names[-1] == "perc_n_2m"
    assert len(set(names)) == 89


def test_name_order_groups():
    names = metric_names()
    pos = {n: i for i, n in enumerate(names)}
    # height metrics before density metrics, first before last, plain before 2 m
    assert pos["zp95_2m_l"] < pos["d2_f"]
    assert pos["zmean_f"] < pos["zmean_l"]
    assert pos["zmean_f"] < pos["zmean_2m_f"] < pos["zmean_l"]
    assert pos["d10_f"] < pos["d2_2m_f"] < pos["d2_l"]
    assert name_order("zsd_f") == 1


# -- worked values ----------------------------------------------------------------


def test_density_example():
    m = compute_metrics(normalized([float(v) for v in range(11)]))
    assert m["d2_f"] == pytest.approx(100 * 9 / 11, abs=1e-12)
    assert m["d2_f"] == pytest.approx(81.818181818, abs=1e-8)


def test_single_return():
    m = compute_metrics(normalized([7.0]))
    for p in PERCENTILES:
        assert m[f"zp{p:02d}_f"] == 7.0
    assert m["zmean_f"] == 7.0
    assert "zsd_f" not in m
    # zmax == zmin leaves the densities undefined
    assert not any(k.startswith("d") and k.endswith("_f") for k in m)


def test_median_of_one_to_ten():
    m = compute_metrics(normalized([float(v) for v in range(1, 11)]))
    assert m["zp50_f"] == 5.5


def test_first_and_last_classes():
    # one pulse with two echoes plus a single echo
    cloud = normalized([20.0, 0.1, 5.0], rn=[1, 2, 1], nr=[2, 2, 1])
    m = compute_metrics(cloud)
    assert m["zmean_f"] == pytest.approx(12.5)
    assert m["zmean_l"] == pytest.approx(2.55)
    assert m["zmean_2m_f"] == pytest.approx(12.5)
    assert m["zmean_2m_l"] == 5.0
    assert m["perc_n_2m"] == pytest.approx(200 / 3)


def test_intermediate_returns_are_neither_first_nor_last():
    cloud = normalized([30.0, 15.0, 0.0], rn=[1, 2, 3], nr=[3, 3, 3])
    m = compute_metrics(cloud)
    assert m["zmean_f"] == 30.0 and m["zmean_l"] == 0.0
    assert m["perc_n_2m"] == pytest.approx(200 / 3)


def test_strict_threshold_at_two_metres():
    m = compute_metrics(normalized([2.0, 2.0, 3.0]))
    assert m["perc_n_2m"] == pytest.approx(100 / 3)
    assert m["zmean_2m_f"] == 3.0


def test_no_canopy_leaves_2m_family_absent():
    m = compute_metrics(normalized([0.1, 0.2, 1.9]))
    assert "zmean_2m_f" not in m
    assert m["perc_n_2m"] == 0.0


def test_empty_cloud_gives_empty_vector():
    assert compute_metrics(normalized([])) == {}


def test_requires_normalized_cloud():
    with pytest.raises(ValidationError):
        compute_metrics(PointCloud([0.0], [0.0], [1.0], [1], [1]))


def test_keys_follow_canonical_order():
    m = compute_metrics(normalized([1.0, 5.0, 9.0], rn=[1, 1, 2], nr=[1, 2, 2]))
    names = metric_names()
    keys = list(m)
    assert keys == sorted(keys, key=names.index)


# -- oracle and properties -------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(returns())
def test_matches_brute_force(data):
    z, rn, nr = data
    got = compute_metrics(normalized(z, rn, nr))
    want = brute_metrics(list(zip(z, rn, nr)))
    assert set(got) == set(want)
    for k, v in want.items():
        assert close(got[k], v), (k, got[k], v)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=60),
       st.sampled_from(PERCENTILES))
def test_percentile_matches_numpy_linear(xs, p):
    got = compute_metrics(normalized(xs))[f"zp{p:02d}_f"]
    assert close(got, float(np.percentile(xs, p, method="linear")))
    assert close(got, percentile_type7(xs, p))


@settings(max_examples=300, deadline=None)
@given(returns())
def test_monotone_families(data):
    m = compute_metrics(normalized(*data))
    for fam in ("_f", "_l", "_2m_f", "_2m_l"):
        ps = [m[f"zp{p:02d}{fam}"] for p in PERCENTILES if f"zp{p:02d}{fam}" in m]
        assert ps == sorted(ps)
        ds = [m[f"d{k}{fam}"] for k in DENSITY_BINS if f"d{k}{fam}" in m]
        assert ds == sorted(ds, reverse=True)
        assert all(0.0 <= d <= 100.0 for d in ds)
        if f"zsd{fam}" in m:
            assert m[f"zsd{fam}"] >= 0


@settings(max_examples=200, deadline=None)
@given(returns(lo=0.0, hi=30.0), st.integers(-20, 20).map(lambda k: k / 4))
def test_translation(data, c):
    z, rn, nr = data
    base = compute_metrics(normalized(z, rn, nr))
    moved = compute_metrics(normalized([v + c for v in z], rn, nr))
    for cls in ("_f", "_l"):
        if f"zmean{cls}" not in base:
            continue
        assert moved[f"zmean{cls}"] == pytest.approx(base[f"zmean{cls}"] + c, abs=1e-9)
        for p in PERCENTILES:
            k = f"zp{p:02d}{cls}"
            assert moved[k] == pytest.approx(base[k] + c, abs=1e-9)
        if f"zsd{cls}" in base:
            assert moved[f"zsd{cls}"] == pytest.approx(base[f"zsd{cls}"], abs=1e-9)
        for k in DENSITY_BINS:
            name = f"d{k}{cls}"
            if name in base and name in moved:
                # rounding may move a height that sits on a bin edge; compare the rest
                hs = np.array([v for v, a, b in zip(z, rn, nr) if (a == 1 if cls == "_f" else a == b)])
                lo, hi = hs.min(), hs.max()
                thr = lo + (k - 1) * (hi - lo) / 10
                if np.all(np.abs(hs - thr) > 1e-9):
                    assert moved[name] == base[name]


def test_metric_csv_round_trip(tmp_path):
    a = compute_metrics(normalized([1.0, 2.5, 7.25, 11.0], rn=[1, 1, 2, 1], nr=[1, 2, 2, 1]))
    b = compute_metrics(normalized([7.0]))
    p = tmp_path / "m.csv"
    write_metric_csv([("p1", a), ("p2", b)], p)
    header = p.read_text().splitlines()[0].split(",")
    assert header == ["id"] + metric_names()
    back = read_metric_csv(p)
    assert back == {"p1": a, "p2": b}
    # missing metrics are empty fields
    row2 = p.read_text().splitlines()[2].split(",")
    assert row2[header.index("zsd_f")] == ""
