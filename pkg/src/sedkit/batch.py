"""Collation of TrainingExamples into dense torch batches."""

from dataclasses import dataclass, fields

import numpy as np
import torch

from .datasets import OUTPUT_FRAMES, STRONG_SOURCES
from .errors import ShapeError


@dataclass
class Batch:
    """Dense batch with per-stream presence flags.

    Label tensors are always allocated (zeros where a stream is absent);
    ``has_*`` flags select the rows that actually carry that label type.
    """

    features: torch.Tensor      # (B, C_in, T, F)
    class_masks: torch.Tensor   # (B, C) bool
    strong: torch.Tensor        # (B, frames_out, C)
    weak: torch.Tensor          # (B, C)
    soft: torch.Tensor          # (B, segments, C)
    has_strong: torch.Tensor    # (B,) bool
    has_weak: torch.Tensor
    has_soft: torch.Tensor
    sources: tuple
    clip_ids: tuple
    embeddings: torch.Tensor = None  # (B, T_e, E) or None

    @property
    def size(self):
        return self.features.shape[0]

    def clone(self):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            kwargs[f.name] = value.clone() if isinstance(value, torch.Tensor) else value
        return Batch(**kwargs)

    def to_dtype(self, dtype):
        out = self.clone()
        out.features = out.features.to(dtype)
        out.strong = out.strong.to(dtype)
        out.weak = out.weak.to(dtype)
        out.soft = out.soft.to(dtype)
        if out.embeddings is not None:
            out.embeddings = out.embeddings.to(dtype)
        return out


def collate(examples, n_segments=10, embeddings_lookup=None) -> Batch:
    """Stack examples into one Batch; features must share a common shape."""
    if not examples:
        raise ShapeError("cannot collate an empty example list")
    n_classes = len(examples[0].class_mask)
    frames_out = OUTPUT_FRAMES

    feats, masks, strongs, weaks, softs = [], [], [], [], []
    has_strong, has_weak, has_soft = [], [], []
    emb_list = []
    for ex in examples:
        feats.append(torch.as_tensor(ex.features.data, dtype=torch.float32))
        masks.append(torch.as_tensor(np.asarray(ex.class_mask, dtype=bool)))
        strongs.append(torch.as_tensor(
            ex.strong_grid if ex.strong_grid is not None
            else np.zeros((frames_out, n_classes), dtype=np.float32)))
        weaks.append(torch.as_tensor(
            ex.weak_vector if ex.weak_vector is not None
            else np.zeros(n_classes, dtype=np.float32)))
        softs.append(torch.as_tensor(
            ex.soft_grid if ex.soft_grid is not None
            else np.zeros((n_segments, n_classes), dtype=np.float32)))
        has_strong.append(ex.source in STRONG_SOURCES)
        has_weak.append(ex.source == "weak")
        has_soft.append(ex.source == "maestro_soft")
        if embeddings_lookup is not None:
            emb_list.append(torch.as_tensor(embeddings_lookup(ex.clip_id),
                                            dtype=torch.float32))

    embeddings = torch.stack(emb_list) if emb_list else None
    return Batch(
        features=torch.stack(feats),
        class_masks=torch.stack(masks),
        strong=torch.stack(strongs),
        weak=torch.stack(weaks),
        soft=torch.stack(softs),
        has_strong=torch.tensor(has_strong),
        has_weak=torch.tensor(has_weak),
        has_soft=torch.tensor(has_soft),
        sources=tuple(ex.source for ex in examples),
        clip_ids=tuple(ex.clip_id for ex in examples),
        embeddings=embeddings,
    )
