"""Dataset access: image files plus a question/options table.

A dataset directory holds items.jsonl (id, image, question, options,
gold) and one .npy gray image per item. make_demo_dataset builds a
seeded synthetic set for exercising the export pipeline end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import IMAGE_SIDE


@dataclass
class VqaItem:
    id: str
    image: np.ndarray
    question: str
    options: list[str]
    gold: int


def load_dataset(directory) -> list[VqaItem]:
    directory = Path(directory)
    items_path = directory / "items.jsonl"
    if not items_path.exists():
        raise FileNotFoundError(f"no items.jsonl under {directory}")
    items = []
    with open(items_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            image = np.load(directory / obj["image"]).astype(float)
            items.append(VqaItem(id=obj["id"], image=image,
                                 question=obj["question"],
                                 options=list(obj["options"]),
                                 gold=int(obj["gold"])))
            if not 0 <= items[-1].gold < len(items[-1].options):
                raise ValueError(f"items.jsonl line {lineno}: gold index out of range")
    return items


_QUESTIONS = [
    "Which corner of the image is brightest?",
    "Where is the dark region concentrated?",
    "Which quadrant holds the strongest gradient?",
]
# The wire format fixes one candidate count per file, so every demo item
# gets a 4-way option set.
_OPTION_SETS = [
    ["top left", "top right", "bottom left", "bottom right"],
    ["upper left", "upper right", "lower left", "lower right"],
]


def make_demo_dataset(directory, n_items: int = 10, seed: int = 0) -> list[VqaItem]:
    """Write a seeded synthetic dataset and return its items."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    items = []
    for i in range(n_items):
        image = rng.normal(0.5, 0.2, size=(IMAGE_SIDE, IMAGE_SIDE))
        r0 = rng.integers(0, IMAGE_SIDE // 2)
        c0 = rng.integers(0, IMAGE_SIDE // 2)
        image[r0:r0 + 4, c0:c0 + 4] += rng.uniform(0.5, 1.0)
        name = f"img{i:03d}.npy"
        np.save(directory / name, image.astype(np.float32))
        question = _QUESTIONS[int(rng.integers(len(_QUESTIONS)))]
        options = _OPTION_SETS[int(rng.integers(len(_OPTION_SETS)))]
        gold = int(rng.integers(len(options)))
        lines.append(json.dumps({"id": f"demo-{i:03d}", "image": name,
                                 "question": question, "options": options,
                                 "gold": gold}, sort_keys=True))
        items.append(VqaItem(id=f"demo-{i:03d}", image=image, question=question,
                             options=options, gold=gold))
    (directory / "items.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return items
