from __future__ import annotations

import random

import numpy as np
import pytest

from esg_forge.checkpoint import DType, NamedTensorMap
from esg_forge.dataset import Pillar, QaTriplet


class StepClock:
    """Deterministic clock: every read advances by ``step`` seconds."""

    def __init__(self, step: float = 0.5, start: float = 0.0):
        self.t = start
        self.step = step

    def __call__(self) -> float:
        self.t += self.step
        return self.t


class CountingEmbedder:
    def __init__(self, inner):
        self.inner = inner
        self.model_id = inner.model_id
        self.calls = 0

    def embed(self, texts):
        self.calls += 1
        return self.inner.embed(texts)


def random_map(rng: np.random.Generator, n_tensors: int | None = None, dtypes=(DType.F32,), meta=None) -> NamedTensorMap:
    n = n_tensors if n_tensors is not None else int(rng.integers(1, 6))
    tensors = {}
    for i in range(n):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(0, 5, size=ndim))
        values = (rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 4)).astype(np.float32)
        dtype = dtypes[int(rng.integers(len(dtypes)))]
        tensors[f"layer{i}.w{rng.integers(1000)}"] = (values, dtype)
    return NamedTensorMap.from_arrays(tensors, meta)


def synthetic_triplets(n: int, seed: int = 0, vocab: int = 400) -> list[QaTriplet]:
    rng = random.Random(seed)
    words = [f"tok{i}" for i in range(vocab)]
    pillars = list(Pillar)
    out = []
    for i in range(n):
        answer = " ".join(rng.choices(words, k=rng.randint(1, 20)))
        if rng.random() < 0.5:
            answer += "."
        out.append(
            QaTriplet(
                id=f"item-{i:05d}",
                question=f"Question {i}: what does the report say about {' '.join(rng.choices(words, k=4))}?",
                answer=answer,
                context=f"Context {i}. " + " ".join(rng.choices(words, k=30)),
                pillar=pillars[i % 3],
            )
        )
    return out


@pytest.fixture
def step_clock():
    return StepClock()


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, text):`` records a PASS/FAIL line for exit criterion ``n``."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    class _Recorder:
        def __init__(self, n: int, text: str):
            self.n, self.text = n, text

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"{status} criterion {self.n}: {self.text}"
            results[self.n] = line
            print(line)
            return False

    return _Recorder


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
