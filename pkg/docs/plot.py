"""Render figures from CSVs written by ``dtrnet analyze`` and ``dtrnet train``.

    python docs/plot.py flops runs/flops/flops_sweep.csv -o flops.png
    python docs/plot.py memory runs/mem/memory_sweep.csv -o memory.png
    python docs/plot.py similarity runs/sim/similarity.csv -o sim.png
    python docs/plot.py loads runs/train/metrics.csv -o loads.png

Needs matplotlib (``pip install -e .[plot]``).
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_sweep(ax, data, column, ylabel):
    n = [int(r["n"]) for r in data]
    ax.plot(n, [float(r[column]) for r in data], marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)


def plot_similarity(ax, path):
    with open(path, newline="") as f:
        table = list(csv.reader(f))
    matrix = [[float(v) for v in row[1:]] for row in table[1:]]
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    ax.figure.colorbar(im, ax=ax)


def plot_loads(ax, data):
    cols = [c for c in data[0] if c.startswith("load_")]
    steps = [int(r["step"]) for r in data]
    for c in cols:
        ax.plot(steps, [float(r[c]) for r in data], label=f"layer {c[5:]}")
    ax.set_xlabel("step")
    ax.set_ylabel("fraction routed to attention")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("kind", choices=["flops", "memory", "similarity", "loads"])
    parser.add_argument("csv")
    parser.add_argument("-o", "--output", default="figure.png")
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if args.kind == "flops":
        plot_sweep(ax, rows(args.csv), "ratio_to_dense", "FLOPs / dense")
    elif args.kind == "memory":
        plot_sweep(ax, rows(args.csv), "ratio", "KV cache / dense")
    elif args.kind == "similarity":
        plot_similarity(ax, args.csv)
    else:
        plot_loads(ax, rows(args.csv))
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)


if __name__ == "__main__":
    main()
