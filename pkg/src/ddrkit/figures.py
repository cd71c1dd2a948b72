"""Report figures rendered next to the delimited output.

Two figures per run: the spread of L2 errors by estimator and nuisance
combo, and (when inference rows exist) the per-coordinate empirical
coverage against the nominal level. Figures are a convenience view of the
CSVs; the CSVs stay the canonical, deterministic output.
"""

from __future__ import annotations

import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _combo_label(estimator: str, pi_spec: str, m_spec: str) -> str:
    if pi_spec == "-" and m_spec == "-":
        return estimator
    return f"{estimator}\n{pi_spec}/{m_spec}"


def render_figures(out_dir: str, records, inference_rows, theta0: Optional[np.ndarray]):
    """Write l2_errors.png (always) and coverage.png (when inference ran)."""
    groups: dict[tuple, list[float]] = {}
    for row in records:
        groups.setdefault((row[1], row[2], row[3]), []).append(row[4])
    if groups:
        labels = [_combo_label(*key) for key in groups]
        data = [groups[key] for key in groups]
        fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(data)), 4.5))
        ax.boxplot(data, tick_labels=labels)
        ax.set_ylabel(r"$\|\hat\theta - \theta_0\|_2$")
        ax.set_title("L2 error by estimator / nuisance combo")
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "l2_errors.png"), dpi=120)
        plt.close(fig)

    if not inference_rows or theta0 is None:
        return
    combos: dict[tuple, dict[int, list[int]]] = {}
    for row in inference_rows:
        per = combos.setdefault((row[1], row[2], row[3]), {})
        per.setdefault(row[4], []).append(row[5])
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    nonzero = np.abs(theta0) > 0.05
    for key, per_coord in combos.items():
        coords = np.array(sorted(per_coord))
        covp = np.array([np.mean(per_coord[j]) for j in coords])
        ax.plot(coords, covp, ".", ms=4, alpha=0.7, label=_combo_label(*key).replace("\n", " "))
    for j in np.flatnonzero(nonzero):
        ax.axvline(j, color="gray", lw=0.4, alpha=0.4)
    ax.axhline(0.95, color="black", lw=0.8, ls="--")
    ax.set_xlabel("coordinate (gray lines: nonzero $\\theta_0$)")
    ax.set_ylabel("empirical coverage")
    ax.set_ylim(0.5, 1.02)
    ax.set_title("Per-coordinate CI coverage")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "coverage.png"), dpi=120)
    plt.close(fig)
