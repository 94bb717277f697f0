import re
import xml.etree.ElementTree as ET

import numpy as np

from vitta import svg


def parse(text):
    return ET.fromstring(text)


class TestLinePlot:
    def test_well_formed_with_fixed_viewbox(self):
        root = parse(svg.line_plot({"a": [0.1, 0.5, 0.9]}, title="t <&>"))
        assert root.get("viewBox") == "0 0 640 360"

    def test_one_polyline_per_series_plus_axes(self):
        text = svg.line_plot({"a": [0, 1], "b": [1, 0], "c": [0.5, 0.5]})
        assert text.count("<polyline") == 4

    def test_points_map_to_plot_box(self):
        text = svg.line_plot({"a": [0.0, 1.0]}, xs=[0, 10])
        pts = re.findall(r'stroke-width="1.2" points="([^"]+)"', text)[0].split()
        (x0, y0), (x1, y1) = [tuple(map(float, p.split(","))) for p in pts]
        assert (x0, x1) == (48.0, 624.0)
        assert (y0, y1) == (320.0, 28.0)

    def test_values_are_clamped_to_range(self):
        text = svg.line_plot({"a": [-5.0, 5.0]})
        ys = [float(p.split(",")[1]) for p in re.findall(r'stroke-width="1.2" points="([^"]+)"', text)[0].split()]
        assert min(ys) >= 28.0 and max(ys) <= 320.0

    def test_boundaries_carry_data_x(self):
        text = svg.line_plot({"a": np.zeros(10)}, vlines=[3, 7])
        assert re.findall(r'data-x="([0-9.]+)"', text) == ["3", "7"]

    def test_deterministic(self):
        args = ({"a": [0.2, 0.4, 0.3]},)
        assert svg.line_plot(*args) == svg.line_plot(*args)

    def test_empty_series(self):
        parse(svg.line_plot({}))


class TestBarChart:
    def test_one_bar_per_value(self):
        text = svg.bar_chart({"x": 0.5, "y": 0.25})
        root = parse(text)
        rects = [e for e in root.iter() if e.tag.endswith("rect")]
        assert len(rects) == 3  # background + 2 bars
        heights = sorted(float(r.get("height")) for r in rects[1:])
        np.testing.assert_allclose(heights, [73.0, 146.0])

    def test_empty(self):
        parse(svg.bar_chart({}))
