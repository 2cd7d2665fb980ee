"""Zone map tests: containment, tie-breaking, sections, distances, IO."""

import numpy as np
import pytest

from roundpred.zones import GeometryError, MapError, Zone, ZoneMap


def square(x0, y0, side):
    return [[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]]


@pytest.fixture
def small_map():
    zones = [
        Zone(id=3, kind="circular", polygon=square(0, 0, 4)),
        Zone(id=7, kind="circular", polygon=square(2, 0, 4)),  # overlaps zone 3 on x in [2,4]
        Zone(id=1, kind="entry", polygon=square(-5, 0, 4), feeds_section=10),
        Zone(id=21, kind="exit", polygon=square(7, 0, 2), feeds_section=11),
        Zone(id=200, kind="excluded", polygon=square(0, 10, 3)),
        Zone(id=301, kind="conflict", polygon=square(20, 20, 1), feeds_section=11),
    ]
    sections = {10: (3,), 11: (7,)}
    return ZoneMap(zones, sections)


def test_containment_interior_boundary_exterior(small_map):
    z = small_map.zone(3)
    assert z.contains([2.0, 2.0])[0]
    assert z.contains([0.0, 2.0])[0]  # boundary counts as inside
    assert z.contains([0.0, 0.0])[0]  # vertex too
    assert z.contains([4.0, 4.0])[0]
    assert not z.contains([4.0001, 2.0])[0]
    assert not z.contains([-1.0, 2.0])[0]


def test_locate_prefers_lowest_id_in_overlap(small_map):
    assert small_map.locate([3.0, 1.0]) == 3  # inside both 3 and 7
    assert small_map.locate([5.0, 1.0]) == 7  # only 7
    assert small_map.locate([50.0, 50.0]) is None


def test_locate_many_matches_scalar_locate(small_map):
    rng = np.random.default_rng(42)
    pts = rng.uniform(-8, 12, size=(400, 2))
    ids = small_map.locate_many(pts)
    for p, got in zip(pts, ids):
        want = small_map.locate(p)
        assert (want is None and got == -1) or want == got


def test_section_of_rules(small_map):
    assert small_map.section_of(3) == 10
    assert small_map.section_of(7) == 11
    assert small_map.section_of(1) == 10  # entry feeds
    assert small_map.section_of(21) == 11
    assert small_map.section_of(301) == 11
    assert small_map.section_of(200) is None
    with pytest.raises(KeyError):
        small_map.section_of(999)


def test_sections_at(small_map):
    pts = np.array([[2.0, 2.0], [5.0, 1.0], [-4.0, 1.0], [1.0, 11.0], [50.0, 50.0]])
    np.testing.assert_array_equal(small_map.sections_at(pts), [10, 11, 10, -1, -1])


def test_distance_to_polygon(small_map):
    z = small_map.zone(3)
    d = z.distance(np.array([[6.0, 2.0], [2.0, 2.0], [-3.0, -4.0]]))
    np.testing.assert_allclose(d, [2.0, 0.0, 5.0], atol=1e-12)


def test_min_distance_to_kinds(small_map):
    pts = np.array([[6.0, 1.0]])  # 1m right of exit zone 21 start? exit spans x [7,9]
    d = small_map.min_distance_to_kinds(pts, ("entry", "exit"))
    np.testing.assert_allclose(d, [1.0], atol=1e-12)


def test_polygon_validation():
    with pytest.raises(GeometryError):
        Zone(id=1, kind="entry", polygon=[[0, 0], [1, 0]])
    with pytest.raises(GeometryError):
        Zone(id=1, kind="entry", polygon=[[0, 0], [1, 0], [1, 0], [0, 1]])
    bowtie = [[0, 0], [2, 2], [2, 0], [0, 2]]
    with pytest.raises(GeometryError):
        Zone(id=1, kind="entry", polygon=bowtie)
    with pytest.raises(GeometryError):
        Zone(id=1, kind="entry", polygon=[[0, 0], [1, np.nan], [1, 1]])


def test_closing_vertex_is_optional():
    a = Zone(id=1, kind="entry", polygon=[[0, 0], [2, 0], [2, 2], [0, 2]])
    b = Zone(id=1, kind="entry", polygon=[[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]])
    np.testing.assert_array_equal(a.polygon, b.polygon)


def test_map_structure_validation():
    circ = Zone(id=5, kind="circular", polygon=square(0, 0, 1))
    entry = Zone(id=6, kind="entry", polygon=square(2, 0, 1))
    with pytest.raises(MapError, match="unknown zone"):
        ZoneMap([circ], {1: (99,)})
    with pytest.raises(MapError, match="non-circular"):
        ZoneMap([circ, entry], {1: (5, 6)})
    with pytest.raises(MapError, match="no section"):
        ZoneMap([circ], {})
    with pytest.raises(MapError, match="more than one"):
        ZoneMap([circ], {1: (5,), 2: (5,)})
    with pytest.raises(MapError, match="duplicate zone ids"):
        ZoneMap([circ, Zone(id=5, kind="entry", polygon=square(3, 0, 1))], {1: (5,)})
    with pytest.raises(MapError, match="feeds unknown section"):
        ZoneMap([circ, Zone(id=6, kind="entry", polygon=square(2, 0, 1), feeds_section=9)], {1: (5,)})
    with pytest.raises(MapError, match="unknown kind"):
        Zone(id=1, kind="mystery", polygon=square(0, 0, 1))
    with pytest.raises(MapError, match="feeds_section"):
        Zone(id=1, kind="excluded", polygon=square(0, 0, 1), feeds_section=2)


def test_json_round_trip(tmp_path, small_map):
    path = tmp_path / "map.json"
    small_map.save(path)
    loaded = ZoneMap.load(path)
    assert loaded.sections == small_map.sections
    assert [z.id for z in loaded.zones] == [z.id for z in small_map.zones]
    for a, b in zip(loaded.zones, small_map.zones):
        np.testing.assert_array_equal(a.polygon, b.polygon)
        assert (a.kind, a.feeds_section) == (b.kind, b.feeds_section)


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(MapError, match="not valid JSON"):
        ZoneMap.load(p)
    p2 = tmp_path / "missing.json"
    p2.write_text("{}")
    with pytest.raises(MapError, match="missing key"):
        ZoneMap.load(p2)
