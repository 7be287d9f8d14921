"""Evaluation artifacts: identity renders, the shape-decomposition table, collapse metrics, reports."""

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from modnet import objective
from modnet.combinator import subset_masks
from modnet.dataset import save_png


@dataclass(frozen=True)
class RoutingRecord:
    sample: int
    shape_id: int
    mask: int
    identity: int


@dataclass
class DecompositionTable:
    """Rows are ground-truth shapes, columns identity modules, entries percentages of that shape's images."""

    shape_names: list
    percent: np.ndarray      # (S, n)
    counts: np.ndarray       # (S, n)

    @property
    def n(self):
        return self.percent.shape[1]

    def purity(self):
        """Per-shape share of the most used identity, in percent (NaN for shapes with no images)."""
        totals = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, self.counts.max(axis=1) / np.maximum(totals, 1) * 100.0, np.nan)

    def rows(self):
        for name, row, total in zip(self.shape_names, self.percent, self.counts.sum(axis=1)):
            if total:
                yield name, row

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["shape", *[f"m_{j + 1}" for j in range(self.n)]])
        for name, row in self.rows():
            writer.writerow([name, *[_fmt(v) for v in row]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_markdown(self):
        head = "| GT shape | " + " | ".join(f"m_{j + 1} (%)" for j in range(self.n)) + " |"
        sep = "|---" * (self.n + 1) + "|"
        body = ["| " + name + " | " + " | ".join(_fmt(v) for v in row) + " |" for name, row in self.rows()]
        return "\n".join([head, sep, *body])


def _fmt(v):
    return "0" if v == 0 else f"{v:.2f}".rstrip("0").rstrip(".") if v != 100 else "100.0"


@torch.no_grad()
def route(pool, dataset, indices, weights=None, eps_fd=1e-2, max_pairs=None, batch_size=64, seed=0):
    """Winning combination for every listed sample, with z set to the posterior mean.

    Hessian pairs are drawn once from a generator seeded with ``seed``, so the
    result is a deterministic function of the model and the data.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("empty evaluation set")
    pool.eval()
    generator = torch.Generator().manual_seed(seed)
    plans = objective.plan_pairs(pool.m, pool.k, max_pairs, generator)
    masks = subset_masks(pool.m)
    records = []
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        x = torch.from_numpy(dataset.batch(idx))
        noise = torch.zeros(len(idx), pool.m, pool.k)
        lat = objective.encode_pool(pool, x, noise)
        winners = objective.score_batch(pool, x, lat, plans, weights, eps_fd).winners()
        shapes = dataset.shape_ids(idx)
        for i, s, w in zip(idx, shapes, winners.tolist()):
            records.append(RoutingRecord(int(i), int(s), masks[w // pool.n], w % pool.n))
    return records


def table_from_records(records, n, shape_names):
    counts = np.zeros((len(shape_names), n), dtype=np.int64)
    for r in records:
        counts[r.shape_id, r.identity] += 1
    totals = counts.sum(axis=1, keepdims=True)
    percent = np.divide(counts * 100.0, totals, out=np.zeros(counts.shape), where=totals > 0)
    return DecompositionTable(list(shape_names), percent, counts)


def routing_table(pool, dataset, indices, weights=None, eps_fd=1e-2, max_pairs=None, seed=0, batch_size=64):
    """Per-shape distribution of winning identities over ``indices``; returns ``(table, records)``."""
    records = route(pool, dataset, indices, weights, eps_fd, max_pairs, batch_size, seed)
    names = list(dataset.manifest.shape_names)[: dataset.manifest.grid[0]]
    return table_from_records(records, pool.n, names), records


def normalized_entropy(counts):
    """Shannon entropy of a histogram divided by log(#bins); 0 for a single bin."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0 or len(counts) < 2:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(len(counts)))


def collapse_metrics(records, n=None, m=None):
    """Usage histograms and normalised entropies over identities and compositional subsets."""
    if not records:
        raise ValueError("no routing records")
    n = n or max(r.identity for r in records) + 1
    m = m or max(r.mask for r in records).bit_length()
    masks = subset_masks(m)
    ident = np.zeros(n, dtype=np.int64)
    subsets = np.zeros(len(masks), dtype=np.int64)
    pos = {s: i for i, s in enumerate(masks)}
    for r in records:
        ident[r.identity] += 1
        subsets[pos[r.mask]] += 1
    pairs = Counter((r.mask, r.identity) for r in records)
    return {
        "identity_usage": ident.tolist(),
        "identity_entropy": normalized_entropy(ident),
        "subset_masks": list(masks),
        "subset_usage": subsets.tolist(),
        "subset_entropy": normalized_entropy(subsets),
        "combinations_used": len(pairs),
        "identities_unused": int((ident == 0).sum()),
        "full_collapse": bool((ident > 0).sum() == 1),
    }


@torch.no_grad()
def identity_images(pool):
    """Decode each identity transform on its own: ``(n, 3, H, W)``."""
    pool.eval()
    return pool.decoder(pool.identity_matrices())


def render_identities(pool, out_dir=None, scale=4):
    """Decode every identity with no compositional factor; optionally write PNGs.

    Writes ``identity_{j}.png`` (1-based) and ``identities_grid.png``.
    """
    imgs = identity_images(pool).cpu().numpy()
    paths = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for j, img in enumerate(imgs, 1):
            paths.append(save_png(img, out_dir / f"identity_{j}.png", scale))
        paths.append(save_png(_grid(imgs), out_dir / "identities_grid.png", scale))
    return imgs, paths


def _grid(imgs, pad=2):
    """Lay ``(n, 3, H, W)`` images side by side on a white strip."""
    n, C, H, W = imgs.shape
    out = np.ones((C, H + 2 * pad, n * (W + pad) + pad))
    for j, img in enumerate(imgs):
        x0 = pad + j * (W + pad)
        out[:, pad:pad + H, x0:x0 + W] = img
    return out


def pairwise_mse(imgs):
    imgs = np.asarray(imgs, dtype=np.float64)
    n = len(imgs)
    return {(a, b): float(((imgs[a] - imgs[b]) ** 2).mean()) for a in range(n) for b in range(a + 1, n)}


def report(metrics_path, table=None, renders_dir=None, collapse=None, out_dir=".", title="Run report", header_note=None):
    """Write ``report.md`` (plus ``loss_curves.png``) summarising a run.

    Sections: loss curves, decomposition table, identity renders, collapse
    metrics. Missing inputs are listed under *Omitted* instead of failing.
    Only the optional ``header_note`` (e.g. a timestamp) varies between
    reruns on identical inputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing = []
    lines = [f"# {title}", ""]
    if header_note:
        lines += [header_note, ""]
    body = []

    body += ["## Loss curves", ""]
    if metrics_path is not None and Path(metrics_path).exists():
        history = [json.loads(line) for line in Path(metrics_path).read_text().splitlines() if line.strip()]
        if history:
            plot = plot_losses(history, out_dir / "loss_curves.png")
            body += [f"![loss curves]({plot.name})", ""]
            last = history[-1]
            body += [f"Final step {last['step']}: " + ", ".join(
                f"{k}={last[k]:.6g}" for k in ("img", "ind", "kl", "extra", "idcls", "total") if last.get(k) is not None), ""]
        else:
            missing.append("metrics log is empty")
    else:
        missing.append(f"metrics log ({metrics_path})")

    body += ["## Shape decomposition", ""]
    if table is not None:
        body += [table.to_markdown(), ""]
        purity = table.purity()
        body += ["Modal-identity share per shape: " + ", ".join(
            f"{name} {p:.1f}%" for name, p in zip(table.shape_names, purity) if not np.isnan(p)), ""]
    else:
        missing.append("decomposition table")

    body += ["## Identity reconstructions", ""]
    grid = Path(renders_dir) / "identities_grid.png" if renders_dir is not None else None
    if grid is not None and grid.exists():
        rel = _relative(grid, out_dir)
        body += [f"![identities]({rel})", ""]
        singles = sorted(Path(renders_dir).glob("identity_*.png"), key=lambda p: int(p.stem.split("_")[1]))
        body += [" ".join(f"![{p.stem}]({_relative(p, out_dir)})" for p in singles), ""]
    else:
        missing.append("identity renders")

    body += ["## Module collapse", ""]
    if collapse is not None:
        body += [f"- identity usage: {collapse['identity_usage']}",
                 f"- identity usage entropy (normalised): {collapse['identity_entropy']:.4f}",
                 f"- subset usage: {dict(zip(collapse['subset_masks'], collapse['subset_usage']))}",
                 f"- subset usage entropy (normalised): {collapse['subset_entropy']:.4f}",
                 f"- full identity collapse: {'yes' if collapse['full_collapse'] else 'no'}", ""]
    else:
        missing.append("collapse metrics")

    if missing:
        body += ["## Omitted", ""] + [f"- {item}: not available" for item in missing] + [""]
    path = out_dir / "report.md"
    path.write_text("\n".join(lines + body))
    return path


def _relative(path, start):
    import os

    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


def plot_losses(history, path, window=20):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from modnet.trainer import moving_average

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("img", "ind", "kl", "extra", "idcls", "total"):
        kept = [(h["step"], h[key]) for h in history if h.get(key) is not None and math.isfinite(h[key])]
        if not kept:
            continue
        steps, vals = map(np.asarray, zip(*kept))
        ma = moving_average(vals, window)
        ax = axes[0] if key in ("img", "total") else axes[1]
        ax.plot(steps[len(steps) - len(ma):], ma, label=key)
    for ax in axes:
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    # Fixed metadata keeps the PNG byte-identical across reruns.
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
