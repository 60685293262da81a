"""Compare the compiled and pure-Python kernels on LCS and Levenshtein.

    python benchmarks/bench_kernels.py [--length 200] [--repeat 5]
"""
from __future__ import annotations

import argparse
import random
import string
import timeit

from esg_forge._kernels import _as_ids, _pykernels

try:
    from esg_forge._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=200, help="tokens per sequence")
    ap.add_argument("--vocab", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = random.Random(args.seed)
    vocab = [f"w{i}" for i in range(args.vocab)]
    a = rng.choices(vocab, k=args.length)
    b = rng.choices(vocab, k=args.length)
    s = "".join(rng.choices(string.ascii_letters, k=args.length // 4))
    t = "".join(rng.choices(string.ascii_letters, k=args.length // 4))

    cases = {
        "lcs_length": (lambda: _pykernels.lcs_length(a, b), lambda: _ckernels.lcs_length(*_as_ids(a, b))),
        "lcs_mask": (lambda: _pykernels.lcs_mask(a, b), lambda: _ckernels.lcs_mask(*_as_ids(a, b))),
        "levenshtein": (lambda: _pykernels.levenshtein(s, t), lambda: _ckernels.levenshtein(s, t)),
    }
    print(f"{'kernel':<12} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for name, (py, cy) in cases.items():
        py_ms = min(timeit.repeat(py, number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<12} {py_ms:12.3f} {'n/a':>12} {'':>8}")
            continue
        assert py() == cy(), f"{name}: backends disagree"
        cy_ms = min(timeit.repeat(cy, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<12} {py_ms:12.3f} {cy_ms:12.3f} {py_ms / cy_ms:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
