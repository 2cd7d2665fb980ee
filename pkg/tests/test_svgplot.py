import numpy as np
import pytest

from roundpred import svgplot
from roundpred.anchors import AnchorSet


def _circle(n=12, r=1.0):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _toy_anchor_set(n_location=8, n_acc=3, steps=6):
    rng = np.random.default_rng(5)
    anchors = np.zeros((n_location * n_acc, steps, 3))
    for k in range(n_location * n_acc):
        heading = 2 * np.pi * (k // n_acc) / n_location
        speed = 1.0 + 0.5 * (k % n_acc)
        s = np.arange(1, steps + 1) * speed
        anchors[k, :, 0] = s * np.cos(heading)
        anchors[k, :, 1] = s * np.sin(heading)
        anchors[k, :, 2] = heading
    counts = rng.integers(3, 9, size=n_location * n_acc)
    return AnchorSet(anchors=anchors, counts=counts, n_location=n_location, n_acc=n_acc, dt=0.16, trim=0.05)


def test_render_is_deterministic():
    def build():
        c = svgplot.SvgCanvas(400, 300)
        c.add_polyline(_circle(20, 3.0), color="#123456", width=2.0)
        c.add_polygon(_circle(5, 1.0), fill="#abcdef")
        c.add_marker((0.5, -0.25), radius=2.0)
        c.add_label((0.0, 3.2), "north")
        return c.render()

    assert build() == build()


def test_svg_structure_and_counts():
    c = svgplot.SvgCanvas(400, 300)
    c.add_polyline([(0, 0), (1, 1), (2, 0)])
    c.add_polyline([(0, 1), (2, 1)], dashed=True)
    c.add_marker((1.0, 0.5))
    text = c.render()
    assert text.startswith("<svg ")
    assert text.rstrip().endswith("</svg>")
    assert text.count("<polyline") == 2
    assert text.count("stroke-dasharray") == 1
    assert text.count("<circle") == 1
    # white background rect always present
    assert '<rect width="400" height="300"' in text


def test_projection_preserves_aspect_and_flips_y():
    c = svgplot.SvgCanvas(500, 500, margin=50.0)
    # square in data space: distances must survive projection up to one scale
    c.add_polyline([(0, 0), (10, 0)])
    c.add_polyline([(0, 0), (0, 10)])
    proj = c._projection()
    pts = proj(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]))
    dx = np.hypot(*(pts[1] - pts[0]))
    dy = np.hypot(*(pts[2] - pts[0]))
    assert dx == pytest.approx(dy, rel=1e-9)
    # larger data y maps to smaller pixel y
    assert pts[2][1] < pts[0][1]


def test_degenerate_inputs_rejected():
    c = svgplot.SvgCanvas()
    with pytest.raises(ValueError):
        c.add_polyline([(0, 0)])
    with pytest.raises(ValueError):
        c.add_polygon([(0, 0), (1, 1)])


def test_save_writes_file(tmp_path):
    c = svgplot.SvgCanvas(200, 200)
    c.add_polyline([(0, 0), (1, 2)])
    out = tmp_path / "fig.svg"
    c.save(out)
    assert out.read_text() == c.render()


def test_plot_anchors_draws_every_class(tmp_path):
    anchors = _toy_anchor_set()
    out = tmp_path / "anchors.svg"
    svgplot.plot_anchors(anchors, out)
    text = out.read_text()
    assert text.count("<polyline") == anchors.n_classes
    # exactly the configured section palette, each used n_acc times
    for color in svgplot.SECTION_COLORS:
        assert text.count(f'stroke="{color}"') == anchors.n_acc


def test_plot_anchors_color_groups_match_sections(tmp_path):
    anchors = _toy_anchor_set(n_location=4, n_acc=2, steps=5)
    out = tmp_path / "anchors.svg"
    svgplot.plot_anchors(anchors, out)
    text = out.read_text()
    used = {c for c in svgplot.SECTION_COLORS if f'stroke="{c}"' in text}
    assert len(used) == 4


def test_plot_scene_single_mean(tmp_path):
    rng = np.random.default_rng(0)
    hist = rng.normal(size=(13, 3))
    fut = rng.normal(size=(25, 3))
    mean = fut + 0.1
    out = tmp_path / "scene.svg"
    svgplot.plot_scene(out, hist, fut, mean, neighbors=[rng.normal(size=(13, 3))])
    text = out.read_text()
    # neighbor + history + truth + one prediction
    assert text.count("<polyline") == 4
    assert text.count("stroke-dasharray") == 1


def test_plot_scene_mixture_opacity_tracks_probability(tmp_path):
    rng = np.random.default_rng(1)
    hist = rng.normal(size=(8, 3))
    fut = rng.normal(size=(10, 3))
    means = rng.normal(size=(6, 10, 3))
    probs = np.array([0.5, 0.2, 0.1, 0.1, 0.05, 0.05])
    out = tmp_path / "mix.svg"
    svgplot.plot_scene(out, hist, fut, means, probs=probs)
    text = out.read_text()
    assert text.count("stroke-dasharray") == 6
    # the most likely component renders at the top opacity of the ramp
    assert 'stroke-opacity="0.95"' in text
    ops = [float(tok.split('"')[1]) for tok in text.split("stroke-opacity=")[1:]]
    pred_ops = ops[-6:]
    assert pred_ops[0] == max(pred_ops)
    assert pred_ops[0] > pred_ops[-1]
