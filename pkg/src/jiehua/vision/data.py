"""Triplet datasets: (image, Canny edge map, text prompt) records on disk.

Manifest file layout (UTF-8, one record per line, tab separated)::

    resolution<TAB>64
    images/0000.ppm<TAB>edges/0000.pgm<TAB>jiehua master style<TAB>jiehua
    ...

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..tensor.rng import Rng
from .canny import canny, edge_density
from .imageio import load_image, resize, save_image

DOMAINS = ("jiehua", "other")
STYLE_A_ARTIST = "jiehua master"
STYLE_B_ARTIST = "wash painter"
EVAL_PROMPT_TEMPLATE = "Green grasslands, Grey sky, People in bright colours, {artist} style"


class ManifestError(ValueError):
    pass


class ManifestRecord(NamedTuple):
    image_path: str
    edge_path: str
    prompt: str
    domain: str


@dataclass
class TripletSample:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    edge: np.ndarray  # HxW float32 in {0, 1}
    prompt: str
    domain: str = "jiehua"

    def __post_init__(self):
        if self.edge.shape != self.image.shape[:2]:
            raise ValueError(f"edge {self.edge.shape} does not match image {self.image.shape}")


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    resolution: int
    root: Path = field(default_factory=Path)

    def by_domain(self, domain: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.domain == domain], self.resolution, self.root)

    def __len__(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        lines = [f"resolution\t{self.resolution}"]
        for r in self.records:
            for f in r:
                if "\t" in f or "\n" in f:
                    raise ManifestError(f"field {f!r} contains a tab or newline")
            lines.append("\t".join(r))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text(), encoding="utf-8")
        os.replace(tmp, path)
        self.root = path.parent
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ManifestError(f"cannot read manifest {path}: {e.strerror or e}") from e
        if not lines or not lines[0].startswith("resolution\t"):
            raise ManifestError(f"{path}: missing resolution header")
        resolution = int(lines[0].split("\t")[1])
        records = []
        for i, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in DOMAINS:
                raise ManifestError(f"{path}:{i}: malformed record {line!r}")
            records.append(ManifestRecord(*parts))
        return cls(records, resolution, path.parent)

    def load_samples(self) -> list[TripletSample]:
        out = []
        for r in self.records:
            img, edge = load_image(self.root / r.image_path), load_image(self.root / r.edge_path)
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            out.append(TripletSample(img, edge[:, :, 0], r.prompt, r.domain))
        return out


def prompt_dropout(prompt: str, p: float, rng: Rng) -> str:
    """Replace the prompt with the empty string with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return "" if rng.random() < p else prompt


def build_manifest(
    image_dir,
    artist_names: dict[str, str],
    resolution: int,
    out_dir,
    domain_patterns: dict[str, str] | None = None,
    low_threshold: float = 0.1,
    high_threshold: float = 0.2,
) -> DatasetManifest:
    """Resize every image under ``image_dir``, extract edges, and write a manifest.

    ``artist_names`` maps glob patterns (matched against the path relative to
    ``image_dir``) to artist names; the prompt is ``"<artist> style"``.
    ``domain_patterns`` maps patterns to a domain tag, default ``jiehua``.
    """
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    if not image_dir.is_dir():
        raise ManifestError(f"input directory {image_dir} does not exist")
    exts = {".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp"}
    paths = sorted(p for p in image_dir.rglob("*") if p.suffix.lower() in exts and p.is_file())
    if not paths:
        raise ManifestError(f"no images found in {image_dir}")

    def match(rel: str, table: dict[str, str]):
        for pattern, value in table.items():
            if fnmatch.fnmatch(rel, pattern):
                return value
        return None

    rels = [p.relative_to(image_dir).as_posix() for p in paths]
    unmatched = [r for r in rels if match(r, artist_names) is None]
    if unmatched:
        raise ManifestError(f"no artist pattern matches: {', '.join(unmatched)}")

    records = []
    for i, (path, rel) in enumerate(zip(paths, rels)):
        img = load_image(path)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        img = resize(img, resolution)
        edge = canny(img, low_threshold, high_threshold)
        stem = f"{i:04d}"
        save_image(img, out_dir / "images" / f"{stem}.ppm")
        save_image(edge, out_dir / "edges" / f"{stem}.pgm")
        domain = match(rel, domain_patterns or {}) or "jiehua"
        if domain not in DOMAINS:
            raise ManifestError(f"unknown domain {domain!r} for {rel}")
        records.append(
            ManifestRecord(f"images/{stem}.ppm", f"edges/{stem}.pgm", f"{match(rel, artist_names)} style", domain)
        )
    manifest = DatasetManifest(records, resolution, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


# ----------------------------------------------------------------- synthetic corpus


def _layout(rng: Rng, res: int) -> dict:
    """Scene content shared by both styles: horizon, main structure, palette."""
    horizon = int(res * rng.uniform(0.55, 0.75))
    w = int(res * rng.uniform(0.3, 0.55))
    h = int(res * rng.uniform(0.25, 0.4))
    cx = int(res * rng.uniform(0.3, 0.7))
    return {
        "horizon": horizon,
        "box": (max(1, cx - w // 2), max(2, horizon - h), min(res - 2, cx + w // 2), horizon),
        "sky": rng.uniform(0.0, 1.0, (3,)),
        "ground": rng.uniform(0.0, 1.0, (3,)),
        "accent": rng.uniform(0.0, 1.0, (3,)),
    }


def render_ruled(rng: Rng, res: int) -> np.ndarray:
    """Style A: ruled-line architecture, thin dark axis-aligned strokes on light paper."""
    lay = _layout(rng, res)
    paper = 0.86 + 0.08 * lay["sky"]
    img = np.broadcast_to(paper, (res, res, 3)).copy()
    img[lay["horizon"] :] = 0.78 + 0.1 * lay["ground"]
    ink = 0.12 + 0.15 * lay["accent"]
    x0, y0, x1, y1 = lay["box"]
    img[y0:y1, x0:x1] = 0.7 + 0.2 * lay["accent"][::-1]
    # roof band wider than the body
    roof_h = max(2, (y1 - y0) // 4)
    rx0, rx1 = max(0, x0 - 3), min(res, x1 + 3)
    img[y0 - 2 : y0 - 2 + roof_h, rx0:rx1] = ink + 0.25
    img[y0 - 2, rx0:rx1] = ink
    img[y0 - 2 + roof_h - 1, rx0:rx1] = ink
    # columns and floor lines
    n_cols = int(rng.integers(3, 7))
    for x in np.linspace(x0, x1 - 1, n_cols).astype(int):
        img[y0:y1, x] = ink
    for y in range(y0 + roof_h + 2, y1, int(rng.integers(3, 6))):
        img[y, x0:x1] = ink
    img[y1 - 1, x0:x1] = ink
    # ruled balustrade along the horizon
    img[lay["horizon"], :] = ink
    step = int(rng.integers(3, 6))
    img[lay["horizon"] : lay["horizon"] + 3, ::step] = ink
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_wash(rng: Rng, res: int) -> np.ndarray:
    """Style B: soft ink wash, smooth low-frequency blobs with no hard edges."""
    lay = _layout(rng, res)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    blend = 1.0 / (1.0 + np.exp(-(yy - lay["horizon"]) / (res / 12)))
    sky = 0.55 + 0.3 * lay["sky"]
    ground = 0.35 + 0.3 * lay["ground"]
    img = sky * (1 - blend[..., None]) + ground * blend[..., None]
    x0, y0, x1, y1 = lay["box"]
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    sx, sy = max(3.0, (x1 - x0) / 2.5), max(3.0, (y1 - y0) / 2.5)
    blob = np.exp(-(((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    color = 0.2 + 0.3 * lay["accent"]
    img = img * (1 - 0.7 * blob[..., None]) + color * 0.7 * blob[..., None]
    for _ in range(int(rng.integers(2, 4))):
        mx, my = rng.uniform(0, res), rng.uniform(res * 0.2, res * 0.6)
        s = rng.uniform(res / 8, res / 4)
        m = 0.25 * np.exp(-(((xx - mx) / (1.6 * s)) ** 2 + ((yy - my) / s) ** 2))
        img = img * (1 - m[..., None]) + 0.3 * m[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


STYLES = {"jiehua": (render_ruled, STYLE_A_ARTIST), "other": (render_wash, STYLE_B_ARTIST)}


def synth_images(n: int, resolution: int, rng: Rng, domain: str) -> np.ndarray:
    render = STYLES[domain][0]
    return np.stack([render(rng.child(i), resolution) for i in range(n)])


def synth_style_corpus(
    n_per_style: int,
    resolution: int,
    rng: Rng,
    out_dir,
    low_threshold: float = 0.1,
    high_threshold: float = 0.2,
) -> DatasetManifest:
    """Generate both styles, extract edges and write ``out_dir/manifest.tsv``.

    Images pass through 8-bit quantization before edge extraction so the
    stored edge map matches what a reload of the stored image would give.
    """
    if n_per_style < 1:
        raise ValueError("n_per_style must be >= 1")
    out_dir = Path(out_dir)
    records = []
    for domain in DOMAINS:
        _, artist = STYLES[domain]
        images = synth_images(n_per_style, resolution, rng.child(domain), domain)
        for i, img in enumerate(images):
            img = np.rint(img * 255) / 255
            stem = f"{domain}_{i:04d}"
            save_image(img, out_dir / "images" / f"{stem}.ppm")
            save_image(canny(img, low_threshold, high_threshold), out_dir / "edges" / f"{stem}.pgm")
            records.append(ManifestRecord(f"images/{stem}.ppm", f"edges/{stem}.pgm", f"{artist} style", domain))
    manifest = DatasetManifest(records, resolution, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def corpus_statistics(manifest: DatasetManifest) -> dict[str, dict[str, float]]:
    stats = {}
    for domain in DOMAINS:
        part = manifest.by_domain(domain)
        if not len(part):
            continue
        dens = [edge_density(load_image(part.root / r.edge_path)) for r in part.records]
        stats[domain] = {"count": len(part), "edge_density": float(np.mean(dens))}
    return stats
