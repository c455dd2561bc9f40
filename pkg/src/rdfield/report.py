"""Rate-distortion table rows and a minimal SVG scatter plot."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

RD_HEADER = "dist,mode,lambda,psnr_db,compressed_bytes,rate_bits_per_feature,train_seconds"

SERIES_COLORS = ["#2a7f3f", "#c2185b", "#1f5fa8", "#e08a00", "#6a3d9a", "#555555"]


@dataclass
class RdRow:
    dist: str
    mode: str
    lam: float
    psnr_db: float | None
    compressed_bytes: int | None
    rate_bits: float | None
    train_seconds: float | None

    @property
    def failed(self) -> bool:
        return self.psnr_db is None

    def csv(self, timing: bool = True) -> str:
        if self.failed:
            return f"{self.dist},{self.mode},{self.lam:g},failed,failed,failed,failed"
        secs = f"{self.train_seconds:.2f}" if timing else "0"
        return (f"{self.dist},{self.mode},{self.lam:g},{self.psnr_db:.4f},{self.compressed_bytes},"
                f"{self.rate_bits:.6f},{secs}")


def rd_csv(rows, timing: bool = True) -> str:
    return "\n".join([RD_HEADER] + [r.csv(timing) for r in rows]) + "\n"


def rd_svg(rows, width: int = 640, height: int = 440, title: str = "PSNR vs feature-grid size") -> str:
    """Size (log axis) against PSNR, one coloured polyline per (dist, mode)."""
    ok = [r for r in rows if not r.failed and r.compressed_bytes > 0 and math.isfinite(r.psnr_db)]
    ml, mr, mt, mb = 64, 150, 36, 52
    pw, ph = width - ml - mr, height - mt - mb
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    if not ok:
        out.append(f'<text x="{width / 2:.1f}" y="{height / 2:.1f}" text-anchor="middle">no data</text>')
        return "\n".join(out + ["</svg>"]) + "\n"

    lx = [math.log10(r.compressed_bytes) for r in ok]
    ys = [r.psnr_db for r in ok]
    x0, x1 = math.floor(min(lx)), math.ceil(max(lx))
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = min(ys), max(ys)
    pad = max(0.5, 0.05 * (y1 - y0))
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (1.0 - (v - y0) / (y1 - y0)) * ph

    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for e in range(x0, x1 + 1):
        x = px(e)
        out.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" text-anchor="middle">1e{e}</text>')
    for i in range(5):
        v = y0 + (y1 - y0) * i / 4
        y = py(v)
        out.append(f'<line x1="{ml - 5}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">compressed size (bytes, log)</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">PSNR (dB)</text>')

    series = {}
    for r in ok:
        series.setdefault((r.dist, r.mode), []).append(r)
    for i, ((dist, mode), pts) in enumerate(sorted(series.items())):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        pts = sorted(pts, key=lambda r: r.compressed_bytes)
        coords = " ".join(f"{px(math.log10(r.compressed_bytes)):.1f},{py(r.psnr_db):.1f}" for r in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-dasharray="4 3"/>')
        for r in pts:
            out.append(f'<circle cx="{px(math.log10(r.compressed_bytes)):.1f}" cy="{py(r.psnr_db):.1f}" '
                       f'r="3.5" fill="{color}"><title>{escape(f"{dist} {mode} {r.lam:g}")}</title></circle>')
        ly = mt + 14 + 16 * i
        out.append(f'<circle cx="{ml + pw + 14}" cy="{ly - 4}" r="4" fill="{color}"/>')
        out.append(f'<text x="{ml + pw + 24}" y="{ly}">{escape(f"{dist} / {mode}")}</text>')
    return "\n".join(out + ["</svg>"]) + "\n"
