"""Procedural toy corpus: textured backgrounds with shape compositions.

Generation is a pure function of the spec; every image derives its own RNG
stream from (seed, index) so the corpus is reproducible file for file.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from dualfusion.ppm import ImageBuffer, image_to_model, quantize_u8, read_ppm, write_ppm
from dualfusion.tensor import Rng


@dataclass
class ToyCorpusSpec:
    count: int = 512
    size: int = 32
    n_styles: int = 32
    families: tuple = ("stripes", "checker", "blobs")
    seed: int = 7

    def __post_init__(self):
        if self.count < 1 or self.size < 8 or self.n_styles < 1:
            raise ValueError("corpus spec out of range")
        if not self.families:
            raise ValueError("corpus spec needs at least one family")


def _style_table(spec):
    """Palette and texture parameters for each style, drawn in fixed order."""
    rng = Rng(spec.seed)
    styles = []
    for i in range(spec.n_styles):
        family = spec.families[i % len(spec.families)]
        c1 = np.array(rng.uniform(3)) * 255.0
        c2 = np.array(rng.uniform(3)) * 255.0
        if np.max(np.abs(c1 - c2)) < 60.0:
            c2 = 255.0 - c2  # keep palettes separable
        params = {
            "angle": rng.uniform() * np.pi,
            "period": 4.0 + rng.uniform() * 6.0,
            "cell": int(2 + rng.integers(0, 4)),
            "blob_seed": int(rng.integers(0, 2 ** 31)),
        }
        styles.append({"family": family, "c1": c1, "c2": c2, **params})
    return styles


def _texture(style, size, phase_x, phase_y):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if style["family"] == "stripes":
        u = (xx + phase_x) * np.cos(style["angle"]) + (yy + phase_y) * np.sin(style["angle"])
        mask = (np.floor(u / (style["period"] / 2.0)) % 2).astype(bool)
    elif style["family"] == "checker":
        c = style["cell"]
        mask = (((xx + phase_x) // c + (yy + phase_y) // c) % 2).astype(bool)
    elif style["family"] == "blobs":
        brng = Rng(style["blob_seed"])
        fld = np.zeros((size, size))
        for _ in range(6):
            cx = (brng.uniform() * size + phase_x) % size
            cy = (brng.uniform() * size + phase_y) % size
            r = size * (0.12 + 0.18 * brng.uniform())
            # wrap-around distance keeps the phase shift seamless
            dx = np.minimum(np.abs(xx - cx), size - np.abs(xx - cx))
            dy = np.minimum(np.abs(yy - cy), size - np.abs(yy - cy))
            fld += np.exp(-(dx ** 2 + dy ** 2) / (2 * r ** 2))
        mask = fld > np.median(fld)
    elif style["family"] == "plain":
        gx = np.cos(style["angle"])
        gy = np.sin(style["angle"])
        u = (gx * xx + gy * yy) / size
        u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
        return style["c1"][None, None, :] * (1 - u[..., None]) + style["c2"][None, None, :] * u[..., None]
    else:
        raise ValueError(f"unknown family {style['family']!r}")
    img = np.where(mask[..., None], style["c1"][None, None, :], style["c2"][None, None, :])
    return img


def _draw_shapes(img, rng):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_shapes = 1 + rng.integers(0, 3)
    for _ in range(n_shapes):
        kind = rng.integers(0, 3)
        cx = rng.uniform() * size
        cy = rng.uniform() * size
        r = size * (0.12 + 0.18 * rng.uniform())
        dark = rng.uniform() < 0.5
        fill = (20.0 + rng.uniform() * 40.0) if dark else (200.0 + rng.uniform() * 40.0)
        if kind == 0:
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
        elif kind == 1:
            inside = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        else:
            inside = (np.abs(xx - cx) + np.abs(yy - cy)) <= r * 1.3
        img[inside] = 0.25 * img[inside] + 0.75 * fill
    return img


def _luminance_gradient(img, rng):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform() * 2 * np.pi
    u = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
    return img * (0.85 + 0.3 * u[..., None])


def render_image(spec, styles, index):
    """One corpus image as uint8 (H,W,3)."""
    rng = Rng(spec.seed + 1 + index)
    style = styles[index % len(styles)]
    phase_x = rng.uniform() * spec.size
    phase_y = rng.uniform() * spec.size
    img = _texture(style, spec.size, phase_x, phase_y).copy()
    img = _draw_shapes(img, rng)
    img = _luminance_gradient(img, rng)
    return quantize_u8(img)


def generate_toy_corpus(spec, outdir):
    """Write the corpus plus a manifest; returns the manifest rows."""
    os.makedirs(outdir, exist_ok=True)
    styles = _style_table(spec)
    rows = []
    for i in range(spec.count):
        pixels = render_image(spec, styles, i)
        name = f"img_{i:05d}.ppm"
        write_ppm(os.path.join(outdir, name), ImageBuffer(spec.size, spec.size, pixels))
        s = styles[i % len(styles)]
        rows.append(
            {
                "file": name,
                "family": s["family"],
                "style": i % len(styles),
                "angle": f"{s['angle']:.6f}",
                "period": f"{s['period']:.6f}",
                "cell": s["cell"],
            }
        )
    with open(os.path.join(outdir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_corpus(outdir):
    """Corpus images as float64 (N,3,H,W) in [-1,1], manifest order."""
    rows = read_manifest(outdir)
    images = [image_to_model(read_ppm(os.path.join(outdir, r["file"]))) for r in rows]
    return np.stack(images), rows


def read_manifest(outdir):
    with open(os.path.join(outdir, "manifest.csv"), newline="") as fh:
        return list(csv.DictReader(fh))


def corpus_arrays(spec):
    """In-memory corpus without touching disk; same pixels as the files."""
    styles = _style_table(spec)
    images = []
    for i in range(spec.count):
        pixels = render_image(spec, styles, i)
        images.append(image_to_model(ImageBuffer(spec.size, spec.size, pixels)))
    return np.stack(images)
