"""SVG court charts: defensive shot charts and basis heatmaps."""

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .court import DEFAULT_COURT, CourtGeometry

PX_PER_FT = 10.0
MARGIN = 20.0
MIN_RADIUS = 2.0
MAX_RADIUS = 9.0


def _lerp(c0, c1, t):
    return tuple(int(round(a + (b - a) * t)) for a, b in zip(c0, c1))


def diverging_color(q):
    """Blue (low) through white to red (high) for ``q`` in [0, 1]."""
    q = float(np.clip(q, 0.0, 1.0))
    blue, white, red = (33, 102, 172), (247, 247, 247), (178, 24, 43)
    rgb = _lerp(blue, white, q / 0.5) if q < 0.5 else _lerp(white, red, (q - 0.5) / 0.5)
    return "#%02x%02x%02x" % rgb


def sequential_color(t):
    t = float(np.clip(t, 0.0, 1.0))
    return "#%02x%02x%02x" % _lerp((255, 255, 255), (8, 48, 107), t)


def _to_px(xy, geometry):
    # baseline at the top, court width across
    x, y = np.asarray(xy, dtype=float)[..., 0], np.asarray(xy, dtype=float)[..., 1]
    return MARGIN + y * PX_PER_FT, MARGIN + x * PX_PER_FT


def court_outline(geometry: CourtGeometry = DEFAULT_COURT):
    """SVG elements for the half-court lines."""
    w, d = geometry.width_ft * PX_PER_FT, geometry.depth_ft * PX_PER_FT
    hx, hy = _to_px(np.array(geometry.hoop), geometry)
    lane_left, _ = _to_px(np.array([0.0, geometry.hoop[1] - 8]), geometry)
    lane_w = 16 * PX_PER_FT
    lane_d = 19 * PX_PER_FT
    r3 = 23.75 * PX_PER_FT
    corner = 22 * PX_PER_FT
    depth = 14 * PX_PER_FT
    dy = np.sqrt(max(23.75 ** 2 - 22 ** 2, 0.0)) * PX_PER_FT
    y_break = MARGIN + (geometry.hoop[0]) * PX_PER_FT + dy
    style = 'fill="none" stroke="#444" stroke-width="1.5"'
    return [
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{w:.1f}" height="{d:.1f}" {style}/>',
        f'<rect x="{lane_left:.1f}" y="{MARGIN}" width="{lane_w:.1f}" height="{lane_d:.1f}" {style}/>',
        f'<circle cx="{hx:.1f}" cy="{hy:.1f}" r="{0.75 * PX_PER_FT:.1f}" {style}/>',
        f'<line x1="{hx - corner:.1f}" y1="{MARGIN}" x2="{hx - corner:.1f}" y2="{MARGIN + depth:.1f}" {style}/>',
        f'<line x1="{hx + corner:.1f}" y1="{MARGIN}" x2="{hx + corner:.1f}" y2="{MARGIN + depth:.1f}" {style}/>',
        f'<path d="M {hx - corner:.1f} {max(y_break, MARGIN + depth):.1f} A {r3:.1f} {r3:.1f} 0 0 0 '
        f'{hx + corner:.1f} {max(y_break, MARGIN + depth):.1f}" {style}/>',
    ]


def _svg(width, height, body, title):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
            f'viewBox="0 0 {width:.0f} {height:.0f}">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>']
                     + body + ["</svg>"]) + "\n"


@dataclass
class DefensiveShotChart:
    """Shots faced by one defender with per-shot effect quantiles.

    ``q_efficiency`` near 0 means the defender lowers the make probability
    most in that shot's basis; ``q_frequency`` near 0 means the defender suppresses
    shots there most.
    """

    defender_id: int
    locations: np.ndarray
    q_efficiency: np.ndarray
    q_frequency: np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.q_efficiency = np.asarray(self.q_efficiency, dtype=float)
        self.q_frequency = np.asarray(self.q_frequency, dtype=float)
        for q in (self.q_efficiency, self.q_frequency):
            if q.shape != (len(self.locations),) or np.any((q < 0) | (q > 1)):
                raise ValueError("quantiles must be one per shot and lie in [0, 1]")


def effect_quantiles(effect_rows, key):
    """``{(player_id, basis): quantile}`` of ``key`` within each basis (ties averaged)."""
    out = {}
    for b in sorted({r.basis for r in effect_rows}):
        sub = [r for r in effect_rows if r.basis == b]
        vals = np.array([getattr(r, key) for r in sub], dtype=float)
        if len(sub) == 1:
            out[(sub[0].player_id, b)] = 0.5
            continue
        below = (vals[None, :] < vals[:, None]).sum(1)
        equal = (vals[None, :] == vals[:, None]).sum(1) - 1
        q = (below + 0.5 * equal) / (len(sub) - 1)
        for r, qi in zip(sub, q):
            out[(r.player_id, b)] = float(qi)
    return out


def build_shot_chart(defender_id, effect_rows, shot_locations, shot_basis) -> DefensiveShotChart:
    """Attach the defender's basis-level quantiles to each shot the defender faced."""
    q_e = effect_quantiles(effect_rows, "efficiency_effect")
    q_f = effect_quantiles(effect_rows, "frequency_effect")
    if not any(k[0] == defender_id for k in q_e):
        raise KeyError(f"defender {defender_id} has no effect estimates")
    shot_basis = np.asarray(shot_basis, dtype=int)
    qe = np.array([q_e.get((defender_id, int(b)), 0.5) for b in shot_basis])
    qf = np.array([q_f.get((defender_id, int(b)), 0.5) for b in shot_basis])
    qf = np.where(np.isfinite(qf), qf, 0.5)
    return DefensiveShotChart(defender_id, shot_locations, qe, qf)


def emit_shot_chart(chart: DefensiveShotChart, geometry: CourtGeometry = DEFAULT_COURT,
                    title=None) -> str:
    """SVG document: one dot per shot faced, color from efficiency, size from frequency."""
    width = geometry.width_ft * PX_PER_FT + 2 * MARGIN
    height = geometry.depth_ft * PX_PER_FT + 2 * MARGIN + 60
    body = court_outline(geometry)
    px, py = _to_px(chart.locations, geometry)
    for x, y, qe, qf in zip(px, py, chart.q_efficiency, chart.q_frequency):
        r = MIN_RADIUS + (MAX_RADIUS - MIN_RADIUS) * qf
        body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r:.2f}" fill="{diverging_color(qe)}" '
                    f'stroke="#222" stroke-width="0.5" fill-opacity="0.85"/>')
    # legend
    ly = geometry.depth_ft * PX_PER_FT + 2 * MARGIN + 10
    body.append(f'<text x="{MARGIN}" y="{ly + 10:.0f}" font-size="11" font-family="sans-serif">'
                "color: efficiency effect quantile (blue lowers makes)</text>")
    for i, q in enumerate(np.linspace(0, 1, 11)):
        body.append(f'<rect x="{MARGIN + 12 * i:.0f}" y="{ly + 16:.0f}" width="12" height="10" '
                    f'fill="{diverging_color(q)}"/>')
    body.append(f'<text x="{MARGIN + 150:.0f}" y="{ly + 26:.0f}" font-size="11" '
                'font-family="sans-serif">size: frequency effect quantile</text>')
    for i, q in enumerate((0.0, 0.5, 1.0)):
        r = MIN_RADIUS + (MAX_RADIUS - MIN_RADIUS) * q
        body.append(f'<circle cx="{MARGIN + 340 + 25 * i:.0f}" cy="{ly + 21:.0f}" r="{r:.1f}" '
                    'fill="#999"/>')
    return _svg(width, height, body, title or f"defender {chart.defender_id}")


def emit_basis_heatmap(surface, geometry: CourtGeometry = DEFAULT_COURT, title="basis") -> str:
    """SVG heatmap of one intensity surface over the tile grid."""
    s = np.asarray(surface, dtype=float)
    if s.shape != (geometry.n_tiles,):
        raise ValueError(f"surface must have {geometry.n_tiles} tiles")
    width = geometry.width_ft * PX_PER_FT + 2 * MARGIN
    height = geometry.depth_ft * PX_PER_FT + 2 * MARGIN
    top = s.max() if s.max() > 0 else 1.0
    centers = geometry.tile_centers()
    px, py = _to_px(centers, geometry)
    half = geometry.tile_size_ft * PX_PER_FT / 2
    body = [f'<rect x="{x - half:.1f}" y="{y - half:.1f}" width="{2 * half:.1f}" '
            f'height="{2 * half:.1f}" fill="{sequential_color(v / top)}"/>'
            for x, y, v in zip(px, py, s)]
    body += court_outline(geometry)
    return _svg(width, height, body, title)
