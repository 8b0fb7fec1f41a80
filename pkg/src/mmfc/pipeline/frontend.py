"""Fusion surrogate and task head (the frozen detector stand-in)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..featuremap import FeatureMap, as_values
from ..ndgrad import (
    LEAKY_SLOPE,
    MLP,
    CheckpointError,
    Dense,
    Graph,
    Node,
    Parameter,
    default_dtype,
    load_into,
    parameters_from_bytes,
    parameters_to_bytes,
)
from ..rng import fnv1a64, make_rng


class Fusion:
    """z = leaky_relu([y1 | y2] W + b) with W of shape 2D x D (rank <= D)."""

    def __init__(self, d: int, rng, dtype=None):
        self.d = d
        self.dense = Dense("fusion", 2 * d, d, rng, dtype)

    @property
    def params(self) -> list[Parameter]:
        return self.dense.params

    def __call__(self, g: Graph, y1: Node, y2: Node) -> Node:
        return g.leaky_relu(self.dense(g, g.concat(y1, y2)))

    def apply(self, y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
        h = self.dense.apply(np.concatenate([y1, y2], axis=-1))
        return np.where(h > 0, h, h * LEAKY_SLOPE)


class TaskHead:
    """Per-query two-layer head producing C+1 class logits (0 = empty)."""

    def __init__(self, d: int, classes: int, hidden: int, rng, dtype=None):
        self.mlp = MLP("head", d, hidden, classes + 1, rng, dtype)

    @property
    def params(self) -> list[Parameter]:
        return self.mlp.params

    def __call__(self, g: Graph, z: Node) -> Node:
        return self.mlp(g, z)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return self.mlp.apply(z)


@dataclass
class TaskPrediction:
    scores: np.ndarray  # (G*G, C+1) softmax scores per cell

    def __post_init__(self):
        if not np.allclose(self.scores.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("cell scores must sum to one")


def softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


class Frontend:
    """Fusion + head, trained once at zero compression and frozen afterwards."""

    def __init__(self, d: int, classes: int, cells: int, hidden: int = 64, seed: int = 0, dtype=None):
        self.d, self.classes, self.cells, self.hidden, self.seed = d, classes, cells, hidden, seed
        dtype = dtype or default_dtype()
        rng = make_rng(seed, "init", "frontend")
        self.fusion = Fusion(d, rng, dtype)
        self.head = TaskHead(d, classes, hidden, rng, dtype)

    @property
    def params(self) -> list[Parameter]:
        return self.fusion.params + self.head.params

    def checksum(self) -> int:
        return fnv1a64(parameters_to_bytes(self.params))

    def fuse(self, y1, y2) -> FeatureMap:
        a, b = as_values(y1), as_values(y2)
        if a.shape != b.shape:
            raise ValueError(f"cannot fuse maps of shapes {a.shape} and {b.shape}")
        return FeatureMap(self.fusion.apply(a, b), "fused")

    def predict(self, z) -> TaskPrediction:
        probs = softmax(self.head.logits(as_values(z)))
        q = probs.shape[0]
        rows = np.arange(q) % self.cells
        # cells with several queries average them
        counts = np.bincount(rows, minlength=self.cells)[:, None]
        cell = np.zeros((self.cells, probs.shape[-1]))
        np.add.at(cell, rows, probs)
        return TaskPrediction(cell / counts)

    def config(self) -> dict:
        return {"kind": "frontend", "d": self.d, "classes": self.classes, "cells": self.cells,
                "hidden": self.hidden, "seed": self.seed}

    def to_bytes(self) -> bytes:
        return parameters_to_bytes(self.params, {"META": json.dumps(self.config(), sort_keys=True).encode()})

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, source) -> "Frontend":
        data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
        tensors, sections = parameters_from_bytes(bytes(data))
        cfg = json.loads(sections["META"].decode())
        if cfg.get("kind") != "frontend":
            raise CheckpointError("not a frontend checkpoint")
        fe = cls(cfg["d"], cfg["classes"], cfg["cells"], cfg["hidden"], cfg["seed"])
        load_into(fe.params, tensors)
        return fe


def fuse(y1, y2, frontend: Frontend) -> FeatureMap:
    return frontend.fuse(y1, y2)


def task_predict(z, frontend: Frontend) -> TaskPrediction:
    return frontend.predict(z)
