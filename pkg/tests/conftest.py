import numpy as np
import pytest
import torch
from hypothesis import settings

from mangagen.annotations import BBox

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps CPU reductions deterministic across runs regardless of machine.
    torch.set_num_threads(1)


def randomize_module(module: torch.nn.Module, seed: int, scale: float = 0.05) -> None:
    """Fill every parameter with small random values so blocks act nontrivially
    (fresh modules are identity maps by construction)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.randn(param.shape, generator=gen) * scale)


def scatter_boxes(
    rng: np.random.Generator, width: int, height: int, count: int, tries: int = 200
) -> list[BBox]:
    """Rejection-sample non-overlapping boxes anywhere on the page."""
    boxes: list[BBox] = []
    for _ in range(tries):
        if len(boxes) == count:
            break
        w = int(rng.integers(max(2, width // 10), max(3, width // 2)))
        h = int(rng.integers(max(2, height // 10), max(3, height // 2)))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        cand = BBox(x, y, x + w, y + h)
        if all(cand.intersection_area(b) == 0 for b in boxes):
            boxes.append(cand)
    return boxes
