"""The three coding topologies.

* Approach 1: fuse on board, code the fused map with one flow codec.
* Approach 2: code camera, then lidar conditioned on the decoded camera map.
* Approach 3: code lidar, then camera conditioned on the decoded lidar map.

Every stream goes through its serialized container so the reported rate is
the exact file size, and decoding sees only what a receiver would see.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bitstream import Bitstream
from ..codec_anf import AnfCodec, compress, decompress
from ..codec_cond import CondCodec, cond_compress, cond_decompress
from ..featuremap import FeatureMap
from .frontend import Frontend, TaskPrediction

TOPOLOGIES = ("a1", "a2", "a3")
APPROACH_IDS = {"a1": 1, "a2": 2, "a3": 3}
# modality coded first (predictor) and second (conditional) per topology
ROLES = {"a2": ("camera", "lidar"), "a3": ("lidar", "camera")}


@dataclass
class TopologyModels:
    frontend: Frontend
    codec: AnfCodec | None = None  # Approach 1
    predictor: AnfCodec | None = None  # Approaches 2/3
    conditional: CondCodec | None = None


@dataclass
class TopologyResult:
    streams: list[bytes]
    reconstruction: FeatureMap  # decoded fused map fed to the task head
    prediction: TaskPrediction | None
    decoded: dict = field(default_factory=dict)

    @property
    def rate_bits(self) -> int:
        return sum(8 * len(s) for s in self.streams)


def _need(models: TopologyModels, *names):
    missing = [n for n in names if getattr(models, n) is None]
    if missing:
        raise ValueError(f"topology needs trained models: {missing}")


def run_approach1(sample, models: TopologyModels, predict: bool = True) -> TopologyResult:
    """``sample`` = (camera, lidar) feature maps."""
    _need(models, "codec")
    y1, y2 = sample
    z = models.frontend.fuse(y1, y2)
    blob = compress(models.codec, z, approach=1).to_bytes()
    zhat = decompress(models.codec, Bitstream.from_bytes(blob), "fused")
    pred = models.frontend.predict(zhat) if predict else None
    return TopologyResult([blob], zhat, pred, {"fused": zhat})


def _run_conditional(topology: str, sample, models: TopologyModels, predict: bool) -> TopologyResult:
    _need(models, "predictor", "conditional")
    first, second = ROLES[topology]
    approach = APPROACH_IDS[topology]
    y = {"camera": sample[0], "lidar": sample[1]}
    y = {k: v if isinstance(v, FeatureMap) else FeatureMap(np.asarray(v), k) for k, v in y.items()}
    blob1 = compress(models.predictor, y[first], approach=approach).to_bytes()
    # the encoder conditions on the *decoded* predictor, exactly as the receiver will
    yhat1 = decompress(models.predictor, Bitstream.from_bytes(blob1), first)
    blob2 = cond_compress(models.conditional, y[second], yhat1, approach=approach).to_bytes()
    yhat2 = cond_decompress(models.conditional, Bitstream.from_bytes(blob2), yhat1)
    dec = {first: yhat1, second: yhat2}
    zhat = models.frontend.fuse(dec["camera"], dec["lidar"])
    pred = models.frontend.predict(zhat) if predict else None
    return TopologyResult([blob1, blob2], zhat, pred, dec)


def run_approach2(sample, models: TopologyModels, case: int = 1, predict: bool = True) -> TopologyResult:
    """``case`` only records how the predictor was paired with the conditional codec
    (case 1: predictor at the smallest lambda, case 2: same lambda); the models
    passed in must already reflect that pairing."""
    if case not in (1, 2):
        raise ValueError(f"case must be 1 or 2, got {case}")
    return _run_conditional("a2", sample, models, predict)


def run_approach3(sample, models: TopologyModels, predict: bool = True) -> TopologyResult:
    return _run_conditional("a3", sample, models, predict)


def run_topology(topology: str, sample, models: TopologyModels, predict: bool = True) -> TopologyResult:
    if topology == "a1":
        return run_approach1(sample, models, predict)
    if topology == "a2":
        return run_approach2(sample, models, predict=predict)
    if topology == "a3":
        return run_approach3(sample, models, predict)
    raise ValueError(f"unknown topology {topology!r}")
