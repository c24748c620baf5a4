"""Raster I/O, dataset manifests and the synthetic parking-lot generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .masks import Sample, num_instances, relabel_sequential
from .tensor import bilinear_matrix

SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Base class for problems with input files or datasets."""


class DecodeError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class ExtentMismatchError(DataError):
    pass


class SynthError(DataError):
    pass


# --------------------------------------------------------------------------
# rasters


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def save_image(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise UnsupportedFormatError(f"image must be (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    img = _open(path)
    if img.mode == "RGB":
        return np.asarray(img, dtype=np.uint8).copy()
    if img.mode == "RGBA":
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    if img.mode == "L":
        g = np.asarray(img, dtype=np.uint8)
        return np.repeat(g[:, :, None], 3, axis=2)
    raise UnsupportedFormatError(f"{path}: expected an 8-bit RGB raster, got mode {img.mode}")


def save_labels(path, labels: np.ndarray) -> None:
    """Write an instance map as a 16-bit single-channel PNG."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise UnsupportedFormatError(f"label map must be 2-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise UnsupportedFormatError("instance ids must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def load_labels(path, relabel: bool = True) -> np.ndarray:
    img = _open(path)
    if img.mode in ("I;16", "I;16L", "I;16B", "I", "L"):
        arr = np.asarray(img).astype(np.int64)
    else:
        raise UnsupportedFormatError(f"{path}: expected a 16-bit single-channel label map, got mode {img.mode}")
    if arr.size and arr.min() < 0:
        raise UnsupportedFormatError(f"{path}: negative instance ids")
    return relabel_sequential(arr) if relabel else arr.astype(np.int32)


def save_mask(path, mask: np.ndarray) -> None:
    """Binary mask as 8-bit 0/255."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("L", "1"):
        raise UnsupportedFormatError(f"{path}: expected an 8-bit single-channel mask, got mode {img.mode}")
    return (np.asarray(img) > 0).astype(np.uint8)


def save_prob(path, prob: np.ndarray) -> None:
    """Probability map as raw float32 ``.npy``."""
    np.save(path, np.asarray(prob, dtype=np.float32), allow_pickle=False)


def load_prob(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2:
        raise UnsupportedFormatError(f"{path}: probability map must be 2-D")
    return arr.astype(np.float32)


# --------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    image: str
    labels: str
    split: str = "train"


@dataclass
class Manifest:
    patch_size: int = 256
    seed: int = 0
    records: list = field(default_factory=list)
    root: Path = field(default=Path("."), repr=False, compare=False)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise DataError(f"record {r.image}: unknown split {r.split!r}")
            prev = seen.setdefault(r.image, r.split)
            if prev != r.split:
                raise DataError(f"{r.image} appears in both {prev!r} and {r.split!r}")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "seed": self.seed,
            "records": [{"image": r.image, "labels": r.labels, "split": r.split} for r in self.records],
        }


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        records = [Record(r["image"], r["labels"], r.get("split", "train")) for r in doc["records"]]
        m = Manifest(int(doc.get("patch_size", 256)), int(doc.get("seed", 0)), records, root=path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    m.validate()
    return m


def save_manifest(path, manifest: Manifest) -> None:
    manifest.validate()
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_sample(manifest: Manifest, record: Record, boundary_dilate: int = 0) -> Sample:
    image = load_image(manifest.resolve(record.image))
    labels = load_labels(manifest.resolve(record.labels))
    if image.shape[:2] != labels.shape:
        raise ExtentMismatchError(f"{record.image} is {image.shape[:2]} but {record.labels} is {labels.shape}")
    return Sample(image, labels, boundary_dilate)


def save_sample(directory, stem: str, sample: Sample) -> Record:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(directory / f"{stem}.png", sample.image)
    save_labels(directory / f"{stem}_labels.png", sample.labels)
    return Record(f"{stem}.png", f"{stem}_labels.png")


def manifest_stats(manifest: Manifest) -> dict:
    """Per-record and per-split instance counts and foreground pixel counts."""
    per_record, per_split = [], {}
    for r in manifest.records:
        labels = load_labels(manifest.resolve(r.labels))
        count, pixels = num_instances(labels), int((labels > 0).sum())
        per_record.append({"image": r.image, "split": r.split, "instances": count, "pixels": pixels})
        tot = per_split.setdefault(r.split, {"images": 0, "instances": 0, "pixels": 0})
        tot["images"] += 1
        tot["instances"] += count
        tot["pixels"] += pixels
    return {"records": per_record, "splits": per_split}


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    h: int = 128
    w: int = 128
    count: int = 12
    touching_pairs: int = 4
    close_pairs: int = 0
    close_gap: int = 2
    shadow: bool = True
    min_side: int = 8
    max_side: int = 20
    max_tries: int = 5000


def _pick_color(rng, avoid: list, min_dist: float) -> np.ndarray:
    for _ in range(200):
        c = rng.integers(0, 256, size=3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c.astype(np.float64)
    return c.astype(np.float64)


def synth_scene(cfg: SynthConfig, seed: int) -> Sample:
    """Axis-aligned "vehicles" on a textured background with an exact instance map.

    ``touching_pairs`` pairs share a full edge (distinct ids). ``close_pairs``
    pairs face each other along a full edge across a ``close_gap``-pixel strip
    of background. All other objects are at least one pixel apart. Ids follow
    placement order: touching pairs, close pairs, singles.
    """
    n_paired = 2 * (cfg.touching_pairs + cfg.close_pairs)
    if n_paired > cfg.count:
        raise SynthError(f"{cfg.touching_pairs} touching + {cfg.close_pairs} close pairs need at least {n_paired} objects")
    if cfg.close_gap < 1:
        raise SynthError("close_gap must be >= 1")
    if cfg.max_side + 2 > min(cfg.h, cfg.w) or cfg.min_side < 1 or cfg.min_side > cfg.max_side:
        raise SynthError("object sizes do not fit the canvas")
    rng = np.random.default_rng(seed)
    h, w = cfg.h, cfg.w

    base = rng.uniform(70, 150)
    tint = rng.uniform(-10, 10, size=3)
    coarse = rng.normal(0, 12, size=(h // 16 + 2, w // 16 + 2))
    smooth = bilinear_matrix(coarse.shape[0], h) @ coarse @ bilinear_matrix(coarse.shape[1], w).T
    image = base + tint[None, None, :] + smooth[:, :, None] + rng.normal(0, 6, size=(h, w, 3))
    bg_color = base + tint

    labels = np.zeros((h, w), dtype=np.int32)
    blocked = np.zeros((h, w), dtype=bool)  # object pixels grown by one: keeps 1-px gaps
    units: list[list[tuple[int, int, int, int]]] = []

    def side():
        return int(rng.integers(cfg.min_side, cfg.max_side + 1))

    def place(uh, uw):
        if uh > h or uw > w:
            return None
        for _ in range(cfg.max_tries):
            y = int(rng.integers(0, h - uh + 1))
            x = int(rng.integers(0, w - uw + 1))
            if not blocked[y:y + uh, x:x + uw].any():
                blocked[max(y - 1, 0):y + uh + 1, max(x - 1, 0):x + uw + 1] = True
                return y, x
        return None

    gaps = [0] * cfg.touching_pairs + [cfg.close_gap] * cfg.close_pairs
    for gap in gaps:
        a_h, a_w, b_len = side(), side(), side()
        if rng.random() < 0.5:  # side by side along a vertical edge of height a_h
            pos = place(a_h, a_w + gap + b_len)
            rects = None if pos is None else [(pos[0], pos[1], a_h, a_w), (pos[0], pos[1] + a_w + gap, a_h, b_len)]
        else:  # stacked along a horizontal edge of width a_w
            pos = place(a_h + gap + b_len, a_w)
            rects = None if pos is None else [(pos[0], pos[1], a_h, a_w), (pos[0] + a_h + gap, pos[1], b_len, a_w)]
        if rects is None:
            raise SynthError(f"could not place object pair after {cfg.max_tries} tries")
        units.append(rects)
    for _ in range(cfg.count - n_paired):
        rh, rw = side(), side()
        pos = place(rh, rw)
        if pos is None:
            raise SynthError(f"could not place object after {cfg.max_tries} tries")
        units.append([(pos[0], pos[1], rh, rw)])

    if cfg.shadow:
        dy, dx = (1, 1) if rng.random() < 0.5 else (1, -1)
        width = int(rng.integers(2, 4))
        shade = np.zeros((h, w), dtype=bool)
        for rects in units:
            for y, x, rh, rw in rects:
                ys, xs = y + dy * width, x + dx * width
                shade[max(ys, 0):max(ys + rh, 0), max(xs, 0):max(xs + rw, 0)] = True
        image[shade] *= 0.6

    next_id = 1
    for rects in units:
        prev = [bg_color]
        for y, x, rh, rw in rects:
            color = _pick_color(rng, prev, 90.0)
            prev.append(color)
            labels[y:y + rh, x:x + rw] = next_id
            image[y:y + rh, x:x + rw] = color + rng.normal(0, 5, size=(rh, rw, 3))
            next_id += 1

    return Sample(np.clip(np.rint(image), 0, 255).astype(np.uint8), labels)


def touching_pairs(labels: np.ndarray) -> set:
    """Unordered id pairs that are 4-adjacent."""
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        m = (a != b) & (a > 0) & (b > 0)
        for p, q in zip(a[m].tolist(), b[m].tolist()):
            pairs.add((min(p, q), max(p, q)))
    return pairs


def synth_dataset(
    directory,
    n_train: int,
    n_test: int,
    cfg: Optional[SynthConfig] = None,
    seed: int = 0,
    n_val: int = 0,
) -> Path:
    """Write a synthetic dataset plus ``manifest.json``; returns the manifest path."""
    cfg = cfg or SynthConfig()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    scene_seeds = ss.generate_state(n_train + n_val + n_test, dtype=np.uint64)
    records = []
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    for i, (split, s) in enumerate(zip(splits, scene_seeds)):
        sample = synth_scene(cfg, int(s))
        rec = save_sample(directory, f"{split}_{i:04d}", sample)
        rec.split = split
        records.append(rec)
    manifest = Manifest(patch_size=cfg.h, seed=seed, records=records, root=directory)
    path = directory / "manifest.json"
    save_manifest(path, manifest)
    return path

