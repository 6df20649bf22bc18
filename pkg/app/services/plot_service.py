"""
SVG plots rendered through Jinja2 templates

Plots are cosmetic: a failure here is logged and never changes an exit code.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from app.models import Trace

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).resolve().parent.parent.parent / "templates"

WIDTH, HEIGHT, PAD = 480, 360, 40


class PlotError(Exception):
    """Custom exception for plot rendering errors"""
    pass


def _scale(values: np.ndarray, lo: float, hi: float, out_lo: float, out_hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return out_lo + (values - lo) / span * (out_hi - out_lo)


def _polyline(x: np.ndarray, y: np.ndarray, box: Dict[str, float]) -> str:
    px = _scale(x, box["x0"], box["x1"], PAD, WIDTH - PAD)
    # SVG y axis points down
    py = _scale(y, box["y0"], box["y1"], HEIGHT - PAD, PAD)
    return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))


def _box(x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    return {"x0": float(np.min(x)), "x1": float(np.max(x)), "y0": float(np.min(y)), "y1": float(np.max(y))}


class PlotService:
    """Service for rendering trace curves, margin histograms and convergence ladders"""

    def __init__(self, templates_dir: Path = TEMPLATES_DIR):
        self.env = Environment(
            loader=FileSystemLoader(str(templates_dir)),
            autoescape=select_autoescape(["svg.j2"]),
            trim_blocks=True,
            lstrip_blocks=True,
        )

    def _render(self, template: str, **context: Any) -> str:
        try:
            return self.env.get_template(template).render(width=WIDTH, height=HEIGHT, pad=PAD, **context)
        except Exception as e:
            raise PlotError(f"could not render {template}: {e}") from e

    def trace_svg(self, trace: Trace, title: str) -> str:
        pts = trace.points
        x, y = pts.real, pts.imag
        box = _box(x, y)
        missed = [
            {"cx": float(cx), "cy": float(cy)}
            for cx, cy in zip(
                _scale(x[~trace.converged], box["x0"], box["x1"], PAD, WIDTH - PAD),
                _scale(y[~trace.converged], box["y0"], box["y1"], HEIGHT - PAD, PAD),
            )
        ]
        return self._render("trace.svg.j2", title=title, points=_polyline(x, y, box), box=box,
                            missed=missed, converged_fraction=trace.converged_fraction)

    def margin_histogram_svg(self, margins: Sequence[float], slack: float, title: str, bins: int = 20) -> str:
        """Histogram of log10(margin); the pass line sits at log10(1 − slack)"""
        arr = np.asarray([m for m in margins if np.isfinite(m) and m > 0], dtype=float)
        if arr.size == 0:
            raise PlotError("no finite margins to plot")
        logs = np.log10(arr)
        threshold = float(np.log10(1.0 - slack)) if slack < 1 else float(np.min(logs))
        counts, edges = np.histogram(logs, bins=bins)
        top = max(int(counts.max()), 1)
        lo, hi = float(min(edges[0], threshold)), float(max(edges[-1], threshold))
        left = _scale(edges[:-1], lo, hi, PAD, WIDTH - PAD)
        right = _scale(edges[1:], lo, hi, PAD, WIDTH - PAD)
        bars = [
            {"x": float(a), "w": float(max(b - a - 1.0, 0.5)),
             "h": float(c / top * (HEIGHT - 2 * PAD)), "below": bool(e1 < threshold)}
            for a, b, c, e1 in zip(left, right, counts, edges[1:])
        ]
        line_x = float(_scale(np.array([threshold]), lo, hi, PAD, WIDTH - PAD)[0])
        return self._render("margins.svg.j2", title=title, bars=bars, line_x=line_x,
                            lo=lo, hi=hi, count=int(arr.size))

    def ladder_svg(self, meshes: Sequence[float], values: Sequence[float], title: str,
                   ylabel: str = "gap") -> str:
        """Log-log convergence ladder; nonpositive values are left out"""
        x = np.asarray(meshes, dtype=float)
        y = np.asarray(values, dtype=float)
        keep = (x > 0) & (y > 0) & np.isfinite(y)
        if np.count_nonzero(keep) < 2:
            raise PlotError("a ladder needs at least two positive values")
        lx, ly = np.log10(x[keep]), np.log10(y[keep])
        box = _box(lx, ly)
        dots = [{"cx": float(a), "cy": float(b)} for a, b in zip(
            _scale(lx, box["x0"], box["x1"], PAD, WIDTH - PAD),
            _scale(ly, box["y0"], box["y1"], HEIGHT - PAD, PAD),
        )]
        return self._render("ladder.svg.j2", title=title, ylabel=ylabel, points=_polyline(lx, ly, box),
                            dots=dots, box=box)

    def write_plots(self, sink, stem: str, plots: Dict[str, Any]) -> List[str]:
        """Render and write every plot; failures are logged and skipped"""
        written = []
        for suffix, render in plots.items():
            try:
                svg = render()
            except PlotError as e:
                logger.warning(f"Skipping plot {stem}-{suffix}.svg: {e}")
                continue
            written.append(str(sink.write_text(f"{stem}-{suffix}.svg", svg)))
        return written


# Global service instance
plot_service = PlotService()
