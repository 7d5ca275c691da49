#!/usr/bin/env python3
"""Render reference PNGs from the tables written by `lisa plot-data`.

Usage: plot_runs.py <plot-data output dir> [--out <dir>]

Reads loss.csv (step, loss columns) and norms.csv (layer_index,
layer_name, norm columns) and writes loss.png and norms.png. Empty cells
(runs shorter than the longest one) are skipped, not interpolated.
Requires matplotlib.
"""

import argparse
import csv
import math
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_table(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def as_float(cell):
    return float(cell) if cell != "" else math.nan


def plot_loss(src, out):
    header, rows = read_table(src / "loss.csv")
    steps = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, name in enumerate(header[1:], start=1):
        pts = [(s, as_float(r[j])) for s, r in zip(steps, rows) if r[j] != ""]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name.removeprefix("loss_"))
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=120)


def plot_norms(src, out):
    header, rows = read_table(src / "norms.csv")
    layers = [int(r[0]) for r in rows]
    names = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, name in enumerate(header[2:], start=2):
        ax.plot(layers, [as_float(r[j]) for r in rows], marker="o", label=name.removeprefix("norm_"))
    ax.set_xticks(layers, names, rotation=45, ha="right")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean weight norm")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "norms.png", dpi=120)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("src", type=pathlib.Path)
    parser.add_argument("--out", type=pathlib.Path)
    args = parser.parse_args()
    out = args.out or args.src
    out.mkdir(parents=True, exist_ok=True)
    plot_loss(args.src, out)
    plot_norms(args.src, out)


if __name__ == "__main__":
    main()
