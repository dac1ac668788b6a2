"""SVG figures for study reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}
MAG_COLOR = "#1f4e79"
ANG_COLOR = "#c55a11"


def _paired_bars(ax_mag, ax_ang, labels, mape, mae):
    xs = range(len(labels))
    ax_mag.bar(xs, mape, color=MAG_COLOR)
    ax_ang.bar(xs, mae, color=ANG_COLOR)
    ax_mag.set_ylabel("magnitude MAPE (%)")
    ax_ang.set_ylabel("angle MAE (deg)")
    for ax in (ax_mag, ax_ang):
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, rotation=30, ha="right")


def plot_study(study, path):
    """Render one study dict to ``path``; returns the path."""
    rows = study["rows"]
    kind = study["kind"]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        if kind == "bad_data":
            frac = [100 * r["fraction"] for r in rows]
            a1.plot(frac, [r["mape_unscreened"] for r in rows], "o--", color=MAG_COLOR, label="no screening")
            a1.plot(frac, [r["mape_screened"] for r in rows], "o-", color=MAG_COLOR, alpha=0.6, label="screened")
            a2.plot(frac, [r["mae_unscreened"] for r in rows], "s--", color=ANG_COLOR, label="no screening")
            a2.plot(frac, [r["mae_screened"] for r in rows], "s-", color=ANG_COLOR, alpha=0.6, label="screened")
            a1.set_ylabel("magnitude MAPE (%)")
            a2.set_ylabel("angle MAE (deg)")
            for ax in (a1, a2):
                ax.set_xlabel("corrupted channels (%)")
                ax.legend(frameon=False)
        elif kind == "pmu_failure":
            r = [row["failures"] for row in rows]
            a1.plot(r, [row["mape"] for row in rows], "o-", color=MAG_COLOR)
            a2.plot(r, [row["mae_deg"] for row in rows], "s-", color=ANG_COLOR)
            a1.set_ylabel("mean magnitude MAPE (%)")
            a2.set_ylabel("mean angle MAE (deg)")
            for ax in (a1, a2):
                ax.set_xlabel("failed PMUs")
                ax.set_xticks(r)
        else:
            _paired_bars(a1, a2, [str(row["case"]) for row in rows],
                         [row["mape"] for row in rows], [row["mae_deg"] for row in rows])
        fig.suptitle(kind.replace("_", " "))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
