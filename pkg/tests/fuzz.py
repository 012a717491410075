"""Seeded fuzz inputs for the problem-text parser."""

from __future__ import annotations

import numpy as np

from generators import random_dpp_problem
from optlayer.dsl import format_problem

ALPHABET = list("varmizesubjct[](),;:=<>+-*'#.0123456789 \n\txyzpq_") + [
    "var ", "param ", "minimize ", "subject to\n", "sum_squares(", "norm1(", "max_elementwise(",
    "==", "<=", "'*", "1e308", "1e-400", "nan", "[1;]", "é", "\x00",
]


def _seeds_corpus(count=20):
    return [format_problem(*random_dpp_problem(s)).encode() for s in range(count)]


def fuzz_inputs(n, seed=0):
    """Yield ``n`` inputs: random token soups, mutated valid programs and raw bytes."""
    rng = np.random.default_rng(seed)
    corpus = _seeds_corpus()
    for i in range(n):
        kind = i % 3
        if kind == 0:
            k = int(rng.integers(0, 40))
            yield "".join(ALPHABET[j] for j in rng.integers(0, len(ALPHABET), size=k))
        elif kind == 1:
            data = bytearray(corpus[int(rng.integers(len(corpus)))])
            for _ in range(int(rng.integers(1, 6))):
                op = int(rng.integers(3))
                pos = int(rng.integers(0, len(data) + 1))
                if op == 0 and data:
                    del data[min(pos, len(data) - 1)]
                elif op == 1:
                    data[pos:pos] = ALPHABET[int(rng.integers(len(ALPHABET)))].encode()
                elif data:
                    data[min(pos, len(data) - 1)] = int(rng.integers(0, 256))
            yield bytes(data)
        else:
            yield bytes(rng.integers(0, 256, size=int(rng.integers(0, 60)), dtype=np.uint8))
