"""Figure rendering for the report path of the CLI.

Figures are written next to the delimited output; every renderer takes the
already-computed records, so plotting never reruns a benchmark.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["render_level_profile", "render_convergence", "render_benchmark_row"]


def _save(fig, outdir: str, name: str) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_level_profile(profile_records: list[dict], outdir: str) -> list[str]:
    """Min/max/avg owned cells per level, one figure per (variant, P, policy)."""
    groups: dict = {}
    for rec in profile_records:
        key = (rec["case"], rec["L"], rec["variant"], rec["P"], rec["policy"])
        groups.setdefault(key, []).append(rec)
    paths = []
    for (case, L, variant, P, policy), recs in groups.items():
        recs = sorted(recs, key=lambda r: r["level"])
        lv = [r["level"] for r in recs]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy(lv, [max(r["max_cells"], 0.5) for r in recs], "o-", label="max")
        ax.semilogy(lv, [max(r["avg_cells"], 0.5) for r in recs], "s--", label="avg")
        ax.semilogy(lv, [max(r["min_cells"], 0.5) for r in recs], "^:", label="min")
        ax.set_xlabel("level")
        ax.set_ylabel("owned cells per rank")
        ax.set_title(f"{case} L={L} {variant} P={P} {policy}")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        name = f"{case}_L{L}_{variant}_P{P}_{policy}_profile.png"
        paths.append(_save(fig, outdir, name))
    return paths


def render_convergence(records: list[dict], outdir: str) -> list[str]:
    """L2 error against refinement level on a log scale."""
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec["case"], rec["p"], rec["variant"]), []).append(rec)
    paths = []
    for (case, p, variant), recs in groups.items():
        recs = sorted(recs, key=lambda r: r["L"])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy([r["L"] for r in recs], [r["l2_error"] for r in recs], "o-")
        ax.set_xlabel("refinements L")
        ax.set_ylabel("L2 error")
        ax.set_title(f"{case} p={p} {variant}")
        ax.grid(True, which="both", alpha=0.3)
        name = f"{case}_p{p}_{variant}_convergence.png"
        paths.append(_save(fig, outdir, name))
    return paths


def render_benchmark_row(row, outdir: str) -> list[str]:
    """Per-level cell counts of a single benchmark run."""
    c = row.config
    fig, ax = plt.subplots(figsize=(5, 3.2))
    lv = list(range(len(row.per_level_cells)))
    ax.semilogy(lv, [max(v, 0.5) for v in row.per_level_cells], "o-", label="cells")
    ax.semilogy(
        lv, [max(v, 0.5) for v in row.metrics.level_max_cells], "s--",
        label=f"max/rank (P={c.ranks})",
    )
    ax.set_xlabel("level")
    ax.set_ylabel("cells")
    ax.set_title(f"{c.case} L={c.refinements} p={c.degree} {c.variant}")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    name = f"{c.case}_L{c.refinements}_p{c.degree}_{c.variant}_levels.png"
    return [_save(fig, outdir, name)]
