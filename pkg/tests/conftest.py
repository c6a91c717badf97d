from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import pytest

from tensorweave import TaskVector, TensorMap

FIXTURES = Path(__file__).parent / "fixtures"


def random_map(rng: random.Random, names_shapes: dict[str, tuple[int, ...]], scale=1.0) -> TensorMap:
    return TensorMap(
        {
            name: np.array(
                [rng.uniform(-scale, scale) for _ in range(int(np.prod(shape, dtype=np.int64)))],
                dtype=np.float32,
            ).reshape(shape)
            for name, shape in names_shapes.items()
        }
    )


def random_instance(
    rng: random.Random, n_tasks: int, max_elements: int = 64
) -> tuple[TensorMap, list[TensorMap]]:
    """A compatible (pretrained, finetuned...) family with 1-3 tensors."""
    shapes = {}
    for t in range(rng.randint(1, 3)):
        count = rng.randint(1, max_elements)
        shapes[f"t{t}.weight"] = (count,) if rng.random() < 0.5 else _factor(count)
    pretrained = random_map(rng, shapes)
    finetuned = [random_map(rng, shapes) for _ in range(n_tasks)]
    return pretrained, finetuned


def _factor(count: int) -> tuple[int, ...]:
    for d in (7, 5, 3, 2):
        if count % d == 0 and count > d:
            return (d, count // d)
    return (count,)


def as_task_vectors(maps: list[TensorMap]) -> list[TaskVector]:
    return [TaskVector(m, source_name=f"task{i+1}", index=i + 1) for i, m in enumerate(maps)]


def map_to_lists(m: TensorMap) -> dict[str, list[float]]:
    return {name: [float(v) for v in m.array(name).ravel()] for name in m}


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240811)


@pytest.fixture
def small_deltas() -> list[TaskVector]:
    d1 = TensorMap({"w": np.array([1.0, -2.0], dtype=np.float32)})
    d2 = TensorMap({"w": np.array([3.0, 0.0], dtype=np.float32)})
    return [TaskVector(d1, "task1", 1), TaskVector(d2, "task2", 2)]
