"""Sliding-window inference and instance extraction."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .masks import connected_components, tile_origins
from .model import Model, multitask_forward
from .tensor import no_grad
from .train import to_input


def forward_probs(model: Model, images: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Eval-mode probabilities for a stack of (n, h, w, 3) uint8 images."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            seg, bnd = multitask_forward(model, to_input(images))
    finally:
        model.training = was_training
    return seg.data[:, 0], (None if bnd is None else bnd.data[:, 0])


def predict(
    model: Model,
    image: np.ndarray,
    patch: int = 256,
    overlap: int = 32,
    batch: int = 8,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Tile the image, run the model per tile and average overlapping outputs."""
    h, w = image.shape[:2]
    if patch % 32:
        raise ValueError(f"patch size {patch} must be divisible by 32")
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must lie in [0, {patch})")
    origins = tile_origins(h, w, patch, patch - overlap)
    seg_acc = np.zeros((h, w), dtype=np.float64)
    bnd_acc = np.zeros((h, w), dtype=np.float64) if model.branches == 2 else None
    hits = np.zeros((h, w), dtype=np.float64)
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        tiles = np.stack([image[y:y + patch, x:x + patch] for y, x in chunk])
        seg, bnd = forward_probs(model, tiles)
        for k, (y, x) in enumerate(chunk):
            seg_acc[y:y + patch, x:x + patch] += seg[k]
            hits[y:y + patch, x:x + patch] += 1
            if bnd_acc is not None:
                bnd_acc[y:y + patch, x:x + patch] += bnd[k]
    seg_out = (seg_acc / hits).astype(np.float32)
    bnd_out = None if bnd_acc is None else (bnd_acc / hits).astype(np.float32)
    return seg_out, bnd_out


def extract_instances(
    seg_prob: np.ndarray,
    threshold: float = 0.5,
    connectivity: int = 4,
    boundary_prob: Optional[np.ndarray] = None,
    subtract_boundary: bool = False,
) -> np.ndarray:
    """Threshold (``>=``) and label connected regions.

    ``subtract_boundary`` removes pixels whose boundary probability reaches the
    threshold before labelling. It is an optional post-processing step and is
    off by default.
    """
    fg = np.asarray(seg_prob) >= threshold
    if subtract_boundary:
        if boundary_prob is None:
            raise ValueError("subtract_boundary needs a boundary probability map")
        fg &= np.asarray(boundary_prob) < threshold
    return connected_components(fg, connectivity)
