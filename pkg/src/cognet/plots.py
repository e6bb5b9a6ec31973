"""Optional matplotlib figures for the CLI; imported only when a plot is requested."""
from pathlib import Path


def _pyplot():
    try:
        import matplotlib
    except ModuleNotFoundError as exc:
        raise ImportError("plots need matplotlib (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def copy_heatmap(path, doc):
    """Decoding step x historical medication heatmap of the copy distribution."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1 + 0.4 * len(doc["historical_medications"]), 1 + 0.4 * len(doc["steps"])))
    im = ax.imshow(doc["pr_c"], cmap="Blues", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(doc["historical_medications"])), doc["historical_medications"], rotation=90)
    ax.set_yticks(range(len(doc["steps"])), doc["steps"])
    ax.set_xlabel("historical medication")
    ax.set_ylabel("emitted token")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def repeat_histograms(path, rows):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    lefts = [r["bin_low"] for r in rows]
    width = rows[0]["bin_high"] - rows[0]["bin_low"]
    for ax, key, title in zip(axes, ("repeated_proportion", "history_jaccard"),
                              ("share of medications seen before", "Jaccard with earlier medications")):
        ax.bar(lefts, [r[key] for r in rows], width=width, align="edge", edgecolor="black")
        ax.set_title(title)
        ax.set_ylabel("visits")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
