"""Synthetic crowd scenes, annotation files, image I/O and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .density import PointSet


class AnnotationParseError(ValueError):
    pass


@dataclass
class CrowdScene:
    image: np.ndarray  # 3 x H x W, values in [0, 1]
    points: PointSet
    id: str = ""

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class SceneDescriptor:
    image_path: str
    points: np.ndarray  # n x 2


def synth_scene(cfg: SynthConfig, index: int) -> CrowdScene:
    """Dark round heads on a noisy light background; deterministic in (seed, index).

    Pixel values are quantized to multiples of 1/255 so that a saved and
    re-loaded scene is bit-identical to the generated one.
    """
    rng = np.random.default_rng([cfg.seed, index])
    S = cfg.size
    n = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    # pixel-center range [0, S-1] on a 1/1024 grid keeps flips exact in floating point
    pts = np.floor(rng.uniform(0.0, S - 1, size=(n, 2)) * 1024.0) / 1024.0
    radii = rng.uniform(cfg.radius_min, cfg.radius_max, size=n)

    tint = rng.uniform(0.75, 0.9, size=3)
    img = tint[:, None, None] + cfg.noise * rng.standard_normal((3, S, S))
    yy, xx = np.mgrid[0:S, 0:S]
    for (x, y), r in zip(pts, radii):
        shade = rng.uniform(0.05, 0.3, size=3)
        x0, x1 = max(int(x - r) - 1, 0), min(int(x + r) + 2, S)
        y0, y1 = max(int(y - r) - 1, 0), min(int(y + r) + 2, S)
        d2 = (xx[y0:y1, x0:x1] - x) ** 2 + (yy[y0:y1, x0:x1] - y) ** 2
        mask = d2 <= r * r
        img[:, y0:y1, x0:x1][:, mask] = shade[:, None]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return CrowdScene(img, PointSet(pts, S, S), id=f"scene_{index:04d}")


def random_crop(s: CrowdScene, size: int, rng: np.random.Generator) -> CrowdScene:
    """Uniform window [x0, x0 + size) x [y0, y0 + size); heads outside are dropped."""
    H, W = s.hw
    if size > H or size > W:
        raise ValueError(f"crop {size} larger than image {H} x {W}")
    y0 = int(rng.integers(0, H - size + 1))
    x0 = int(rng.integers(0, W - size + 1))
    return crop_at(s, x0, y0, size)


def crop_at(s: CrowdScene, x0: int, y0: int, size: int) -> CrowdScene:
    p = s.points.points
    keep = (p[:, 0] >= x0) & (p[:, 0] < x0 + size) & (p[:, 1] >= y0) & (p[:, 1] < y0 + size)
    pts = p[keep] - np.array([x0, y0], dtype=np.float64)
    img = s.image[:, y0:y0 + size, x0:x0 + size].copy()
    return CrowdScene(img, PointSet(pts, size, size), s.id)


def hflip(s: CrowdScene) -> CrowdScene:
    H, W = s.hw
    p = s.points.points.copy()
    p[:, 0] = (W - 1) - p[:, 0]
    # x in (W-1, W) would map below zero; such heads sit in the last pixel column
    p[:, 0] = np.maximum(p[:, 0], 0.0)
    return CrowdScene(s.image[:, :, ::-1].copy(), PointSet(p, H, W), s.id)


def augment(s: CrowdScene, crop: int, rng: np.random.Generator) -> CrowdScene:
    out = random_crop(s, crop, rng)
    if rng.random() < 0.5:
        out = hflip(out)
    return out


# ---------------------------------------------------------------------------
# netpbm images
# ---------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    C, H, W = img.shape
    magic = "P6" if C == 3 else "P5"
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read binary P5/P6; returns 3 x H x W floats in [0, 1] (gray is replicated)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 images are supported")
    C = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=H * W * C, offset=pos)
    img = data.reshape(H, W, C).transpose(2, 0, 1).astype(np.float64) / 255.0
    return np.repeat(img, 3, axis=0) if C == 1 else img


# ---------------------------------------------------------------------------
# annotation files: "<image path> <n> x1 y1 ... xn yn" per line
# ---------------------------------------------------------------------------

def format_annotation(image_path: str, points: np.ndarray) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    coords = " ".join(f"{repr(float(x))} {repr(float(y))}" for x, y in pts)
    return f"{image_path} {len(pts)}" + (f" {coords}" if len(pts) else "")


def save_annotations(path: str | Path, descriptors: list[SceneDescriptor]) -> None:
    lines = [format_annotation(d.image_path, d.points) for d in descriptors]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_annotations(path: str | Path) -> list[SceneDescriptor]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            n = int(fields[1])
            vals = [float(v) for v in fields[2:]]
        except (IndexError, ValueError):
            raise AnnotationParseError(f"{path}:{lineno}: expected '<image> <n> x y ...'") from None
        if n < 0 or len(vals) != 2 * n:
            raise AnnotationParseError(f"{path}:{lineno}: expected {2 * max(n, 0)} coordinates, got {len(vals)}")
        out.append(SceneDescriptor(fields[0], np.array(vals, dtype=np.float64).reshape(n, 2)))
    return out


MANIFEST = "annotations.txt"


def write_dataset(out_dir: str | Path, scenes: list[CrowdScene]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    descs = []
    for s in scenes:
        name = f"{s.id}.ppm"
        write_ppm(out / name, s.image)
        descs.append(SceneDescriptor(name, s.points.points))
    save_annotations(out / MANIFEST, descs)
    return out / MANIFEST


def load_dataset(data_dir: str | Path) -> list[CrowdScene]:
    root = Path(data_dir)
    manifest = root / MANIFEST if root.is_dir() else root
    scenes = []
    for d in load_annotations(manifest):
        img = read_pnm(manifest.parent / d.image_path)
        scenes.append(CrowdScene(img, PointSet(d.points, img.shape[1], img.shape[2]),
                                 Path(d.image_path).stem))
    return scenes


def synth_dataset(cfg: SynthConfig) -> list[CrowdScene]:
    return [synth_scene(cfg, i) for i in range(cfg.n_scenes)]

