"""Small synthetic study corpora for tests and demos.

Eight globally distinct grayscale patterns stand in for X-rays; each pairs
with a caption naming its pattern, so a desk-scale captioner can overfit the
set and the full preprocessing/training/generation pipeline can run without
any external data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .pgm import write_pgm

PATTERN_NAMES = [
    "vertical gradient",
    "horizontal gradient",
    "diagonal gradient",
    "central bright focus",
    "vertical stripe texture",
    "horizontal stripe texture",
    "checkered block texture",
    "dark outer frame",
]


def pattern_image(name: str, side: int = 32) -> np.ndarray:
    """Deterministic [0, 1] grid for one named pattern."""
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    if name == "vertical gradient":
        return yy
    if name == "horizontal gradient":
        return xx
    if name == "diagonal gradient":
        return (xx + yy) / 2
    if name == "central bright focus":
        return np.exp(-(((xx - 0.5) ** 2 + (yy - 0.5) ** 2) / 0.08))
    if name == "vertical stripe texture":
        return (np.sin(xx * np.pi * 6) + 1) / 2
    if name == "horizontal stripe texture":
        return (np.sin(yy * np.pi * 6) + 1) / 2
    if name == "checkered block texture":
        return (np.floor(xx * 4) + np.floor(yy * 4)) % 2
    if name == "dark outer frame":
        pad = max(1, side // 8)
        img = np.zeros((side, side))
        img[pad:side - pad, pad:side - pad] = 1.0
        return img
    raise ValueError(f"unknown pattern {name!r}")


def caption_for(name: str) -> list[str]:
    return f"{name} appears across the whole lung field".split()


def overfit_pairs(side: int = 32) -> list[tuple[str, np.ndarray, list[str]]]:
    """(study id, image, caption tokens) for the eight-pattern corpus."""
    return [
        (f"study{i}", pattern_image(name, side), caption_for(name))
        for i, name in enumerate(PATTERN_NAMES)
    ]


_LABELS = [
    [["lung opacity", "present"]],
    [["edema", "absent"]],
    [],
    [["cardiomegaly", "uncertain"]],
    [["pleural effusion", "present"], ["pneumothorax", "absent"]],
    [],
    [["atelectasis", "present"]],
    [["pneumonia", "absent"]],
]


def write_raw_corpus(directory, side: int = 32, copies: int = 1) -> Path:
    """Write PGM images plus a JSONL corpus file; returns the corpus path.

    ``copies`` repeats each pattern with a distinct id so splits have enough
    records to populate every part.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for copy in range(copies):
        for i, name in enumerate(PATTERN_NAMES):
            study_id = f"study{copy * len(PATTERN_NAMES) + i}"
            rel = f"images/{study_id}.pgm"
            write_pgm(directory / rel, pattern_image(name, side))
            record = {
                "id": study_id,
                "impression": " ".join(caption_for(name)) + ".",
                "findings": "",
                "labels": _LABELS[i],
                "image": rel,
            }
            lines.append(json.dumps(record, sort_keys=True))
    corpus = directory / "corpus.jsonl"
    corpus.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return corpus
