"""Rendering of study reports: plain-text tables and minimal SVG figures."""

from __future__ import annotations

from pathlib import Path

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_text(report: dict) -> str:
    lines = []
    nets = report.get("networks", {})
    lines.append(f"Networks: {len(nets)}")
    for name, info in sorted(nets.items()):
        lines.append(
            f"  {name}: {info['n_loads']} loads ({info['n_fixed']} fixed), "
            f"{info['n_buses']} buses, ref min V {info['ref_v_min_pu']:.4f} pu"
        )
    if "allocation" in report:
        lines.append("")
        lines.append("Allocation method (vs ground truth):")
        lines.append(f"  {'network':>8} {'MSE_vm [pu^2]':>14} {'E_maxTRL':>10} {'E_maxLNL':>10} {'E_minVM':>10}")
        for name, block in sorted(report["allocation"]["per_network"].items()):
            k = block["kpis"]
            lines.append(
                f"  {name:>8} {k['mse_vm']:>14.3e} {k['e_max_trl']:>10.2%} {k['e_max_lnl']:>10.2%} {k['e_min_vm']:>10.2%}"
            )
        pooled = report["allocation"]["pooled_kpis"]
        lines.append(
            f"  {'pooled':>8} {pooled['mse_vm']:>14.3e} {pooled['e_max_trl']:>10.2%}"
            f" {pooled['e_max_lnl']:>10.2%} {pooled['e_min_vm']:>10.2%}"
        )
    if report.get("permutation"):
        lines.append("")
        lines.append("Permutation method, pooled voltage MSE per scenario:")
        lines.append(f"  {'scenario':>12} {'mean [pu^2]':>13} {'std':>10} {'conv.slope':>11}")
        for scen, block in sorted(report["permutation"].items()):
            p = block["pooled"]
            lines.append(
                f"  {scen:>12} {p['mse_vm_mean']:>13.3e} {p['mse_vm_std']:>10.2e} {p['convergence_slope']:>11.2f}"
            )
    return "\n".join(lines) + "\n"


def _svg_frame(width: int, height: int, body: str, title: str) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14" font-family="sans-serif">{title}</text>\n'
        f"{body}</svg>\n"
    )


def svg_lines(series: dict[str, list[float]], path, title: str, log_y: bool = False) -> Path:
    """Polyline chart, one series per label, legend in the top right."""
    import math

    width, height = 640, 400
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    all_vals = [v for vals in series.values() for v in vals if v > 0 or not log_y]
    if not all_vals:
        all_vals = [0.0, 1.0]
    conv = (lambda v: math.log10(max(v, 1e-300))) if log_y else (lambda v: v)
    lo = min(conv(v) for v in all_vals)
    hi = max(conv(v) for v in all_vals)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())

    def sx(i):
        return left + pw * (i / max(n - 1, 1))

    def sy(v):
        return top + ph * (1.0 - (conv(v) - lo) / (hi - lo))

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for j, (label, vals) in enumerate(sorted(series.items())):
        color = _PALETTE[j % len(_PALETTE)]
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(vals))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 14 * j
        body.append(f'<line x1="{width - 150}" y1="{ly - 4}" x2="{width - 130}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{width - 125}" y="{ly}" font-size="11" font-family="sans-serif">{label}</text>')
    scale = "log10" if log_y else "linear"
    body.append(
        f'<text x="{left}" y="{height - 8}" font-size="11" font-family="sans-serif">'
        f"x: iteration, y ({scale}): [{10 ** lo if log_y else lo:.3g}, {10 ** hi if log_y else hi:.3g}]</text>"
    )
    path = Path(path)
    path.write_text(_svg_frame(width, height, "\n".join(body) + "\n", title))
    return path


def svg_histogram(values, path, title: str, bins: int = 30) -> Path:
    import numpy as np

    width, height = 640, 400
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    peak = max(int(counts.max()), 1)
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    bw = pw / bins
    for i, c in enumerate(counts):
        h = ph * c / peak
        body.append(
            f'<rect x="{left + i * bw:.1f}" y="{top + ph - h:.1f}" width="{bw:.1f}" height="{h:.1f}" '
            f'fill="{_PALETTE[0]}" stroke="white" stroke-width="0.5"/>'
        )
    body.append(
        f'<text x="{left}" y="{height - 8}" font-size="11" font-family="sans-serif">'
        f"x: [{edges[0]:.3g}, {edges[-1]:.3g}], y: count (max {peak})</text>"
    )
    path = Path(path)
    path.write_text(_svg_frame(width, height, "\n".join(body) + "\n", title))
    return path


def write_study_svgs(report: dict, outdir) -> list[Path]:
    """Convergence curve and per-iteration MSE histogram per scenario."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    perm = report.get("permutation", {})
    if perm:
        curves = {scen: block["pooled"]["mse_vm_cumulative"] for scen, block in perm.items()}
        written.append(svg_lines(curves, outdir / "mse_convergence.svg", "Cumulative voltage MSE", log_y=True))
        for scen, block in sorted(perm.items()):
            written.append(
                svg_histogram(
                    block["pooled"]["mse_vm_per_iter"],
                    outdir / f"mse_hist_{scen}.svg",
                    f"Per-iteration voltage MSE: {scen}",
                )
            )
    return written
