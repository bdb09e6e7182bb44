import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nishilab.geometry import (
    MEAN_FIELD,
    MEAN_FIELD_COMPLETE,
    NEAREST_NEIGHBOR,
    PLAQUETTE,
    RANDOM_FIELD,
    CouplingFamily,
    GeometryError,
    build_family,
    build_lattice,
    custom_family,
    expected_family_size,
)


def _scan_bonds(lat):
    """Pairs of sites at unit Manhattan distance, by brute force over coordinates."""
    out = set()
    for i, j in itertools.combinations(range(lat.n_sites), 2):
        if sum(abs(a - b) for a, b in zip(lat.coords(i), lat.coords(j))) == 1:
            out.add((i, j))
    return out


def test_ea_3x3_has_twelve_bonds():
    lat = build_lattice(2, 3)
    fam = build_family(lat, NEAREST_NEIGHBOR)
    assert len(fam) == 12
    assert set(fam.ranges) == _scan_bonds(lat)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 3), L=st.integers(2, 5))
def test_bond_count_matches_scan_and_closed_form(d, L):
    lat = build_lattice(d, L)
    fam = build_family(lat, NEAREST_NEIGHBOR)
    assert set(fam.ranges) == _scan_bonds(lat)
    assert len(fam) == expected_family_size(lat, NEAREST_NEIGHBOR)


@pytest.mark.parametrize("d,L", [(2, 2), (2, 4), (3, 3), (4, 2)])
def test_plaquette_count(d, L):
    lat = build_lattice(d, L)
    fam = build_family(lat, PLAQUETTE)
    assert len(fam) == expected_family_size(lat, PLAQUETTE)
    for r in fam.ranges:
        pts = np.array([lat.coords(s) for s in r])
        spread = pts.max(axis=0) - pts.min(axis=0)
        assert sorted(spread.tolist()) == [0] * (d - 2) + [1, 1]


def test_mean_field_complete():
    lat = build_lattice(1, 8, MEAN_FIELD)
    fam = build_family(lat, MEAN_FIELD_COMPLETE, 2)
    assert len(fam) == math.comb(8, 2) == 28
    fam3 = build_family(lat, MEAN_FIELD_COMPLETE, 3)
    assert len(fam3) == 56


def test_random_field_one_per_site():
    lat = build_lattice(2, 3)
    assert build_family(lat, RANDOM_FIELD).ranges == tuple((i,) for i in range(9))


def test_errors():
    with pytest.raises(GeometryError):
        build_lattice(2, 0)
    with pytest.raises(GeometryError):
        build_family(build_lattice(1, 3, MEAN_FIELD), MEAN_FIELD_COMPLETE, 4)
    with pytest.raises(GeometryError):
        build_family(build_lattice(1, 4), PLAQUETTE)
    with pytest.raises(GeometryError):
        custom_family(build_lattice(1, 3), [(0, 1), (1, 1)])
    with pytest.raises(GeometryError):
        custom_family(build_lattice(1, 3), [(0, 3)])


def test_single_site_lattice_rejects_bonds():
    with pytest.raises(GeometryError):
        build_family(build_lattice(2, 1), NEAREST_NEIGHBOR)


def test_family_sizes_from_examples():
    assert len(build_family(build_lattice(2, 4), NEAREST_NEIGHBOR)) == 24
    assert len(build_family(build_lattice(1, 4, MEAN_FIELD), MEAN_FIELD_COMPLETE, 2)) == 6
    assert len(build_family(build_lattice(1, 5), RANDOM_FIELD)) == 5
    assert build_lattice(1, 16, MEAN_FIELD).n_sites == 16
    assert build_lattice(3, 2).n_sites == 8


@pytest.mark.parametrize("kind,d,L", [(NEAREST_NEIGHBOR, 2, 4), (NEAREST_NEIGHBOR, 3, 3), (PLAQUETTE, 3, 3)])
def test_translation_closure(kind, d, L):
    """Each range is its minimal corner plus one of the base offsets sets."""
    lat = build_lattice(d, L)
    fam = build_family(lat, kind)
    shapes = set()
    for r in fam.ranges:
        pts = np.array([lat.coords(s) for s in r])
        corner = pts.min(axis=0)
        assert np.all(pts < L) and np.all(pts >= 0)
        shapes.add(tuple(sorted(map(tuple, (pts - corner).tolist()))))
    expected = d if kind == NEAREST_NEIGHBOR else math.comb(d, 2)
    assert len(shapes) == expected


def test_build_is_deterministic():
    lat = build_lattice(3, 3)
    assert build_family(lat, PLAQUETTE).dumps() == build_family(lat, PLAQUETTE).dumps()


def test_canonical_order_and_json_roundtrip():
    lat = build_lattice(1, 4)
    a = custom_family(lat, [(2, 1), (0, 3), (1, 0)])
    b = custom_family(lat, [(0, 1), (1, 2), (3, 0)])
    assert a == b
    assert a.dumps() == b.dumps()
    back = CouplingFamily.from_json(a.to_json(), n_sites=4)
    assert back == a


def test_masks_match_sites():
    lat = build_lattice(2, 3)
    fam = build_family(lat, PLAQUETTE)
    for m, r in zip(fam.masks, fam.ranges):
        assert int(m) == sum(1 << s for s in r)
    assert fam.sites.shape == (len(fam), 4)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 3), L=st.integers(1, 4), data=st.data())
def test_index_coords_roundtrip(d, L, data):
    lat = build_lattice(d, L)
    i = data.draw(st.integers(0, lat.n_sites - 1))
    assert lat.index(lat.coords(i)) == i
