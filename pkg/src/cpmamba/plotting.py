"""Static SVG curves of metric rows versus SNR."""
from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _series(rows, field):
    out = defaultdict(list)
    for row in rows:
        value = row.nmse_db if field == "nmse_db" else getattr(row, field)
        if math.isfinite(value):
            out[row.method].append((row.snr_db, value))
    return {m: sorted(pts) for m, pts in out.items()}


def plot_metrics(rows, path, title: str | None = None) -> None:
    """Two panels: MPE (m) and NMSE (dB) against SNR, one line per method.

    Non-finite points (e.g. MPE of a method without positions, or the
    -inf dB of a perfect estimate) are left out of the curve.
    """
    fig, (ax_mpe, ax_nmse) = plt.subplots(1, 2, figsize=(10, 4))
    for ax, field, label in ((ax_mpe, "mpe_m", "MPE (m)"), (ax_nmse, "nmse_db", "NMSE (dB)")):
        for method, pts in _series(rows, field).items():
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=method)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        if ax.lines:
            ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
