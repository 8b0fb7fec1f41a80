"""Rate-distortion training of the codecs and the zero-compression front-end stage."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec_anf import AnfCodec
from .codec_cond import CondCodec
from .ndgrad import ConfigError, Graph, adam_step, evaluate, gradient
from .pipeline.frontend import Frontend
from .rng import make_rng

LAMBDA_GRID = (0.0078125, 0.015625, 0.03125, 0.0625)
STAGES = ("task-head", "anf", "cond")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0625
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    stage: str = "anf"
    case: int | None = None
    # MSE is measured on features mapped to an 8-bit-like range; rate in bits per feature element
    distortion_scale: float = 256.0
    # step-size multiplier for the per-channel prior (two scalars per channel); at
    # the codec learning rate alone Adam cannot move them far enough in 50 epochs
    prior_lr_scale: float = 10.0
    lambda_grid: tuple = LAMBDA_GRID

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not self.prior_lr_scale > 0:
            raise ConfigError(f"prior_lr_scale must be positive, got {self.prior_lr_scale}")
        if self.stage != "task-head" and not any(np.isclose(self.lam, g) for g in self.lambda_grid):
            raise ConfigError(f"lambda {self.lam} is not in the configured grid {self.lambda_grid}")
        if self.case is not None and (self.stage != "cond" or self.case not in (1, 2)):
            raise ConfigError("case 1/2 applies to the cond stage only")
        return self

    @property
    def lambda_index(self) -> int:
        return int(np.argmin([abs(self.lam - g) for g in self.lambda_grid]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        data = dict(data)
        if "lambda_grid" in data:
            data["lambda_grid"] = tuple(data["lambda_grid"])
        return cls(**data).validate()


FRONTEND_DEFAULTS = TrainConfig(stage="task-head", epochs=20, lr=1e-3, lam=0.0, batch_size=8)


@dataclass
class EpochRecord:
    epoch: int
    rate_bits: float
    mse: float
    loss: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "rate_bits", "mse", "loss", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.rate_bits), repr(r.mse), repr(r.loss), f"{r.seconds:.4f}"])
        return buf.getvalue()

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


def rd_loss(x, xhat, rate_bits: float, lam: float) -> float:
    """L = R + lambda * MSE(x, xhat), the MSE averaged over every element."""
    x = np.asarray(x, np.float64)
    xhat = np.asarray(xhat, np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return float(rate_bits + lam * np.mean((x - xhat) ** 2))


def rd_loss_nodes(g: Graph, x, xhat, rate_bits, lam: float):
    return rate_bits + g.scale(g.reduce_mean(g.square(x - xhat)), lam)


# --------------------------------------------------------------------------


def _batches(n: int, batch: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _run(cfg: TrainConfig, params, graph: Graph, n: int, feed, extra_stats) -> TrainLog:
    """Shared epoch loop.  ``feed(idx, epoch, step)`` builds the input dict."""
    log = TrainLog()
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = make_rng(cfg.seed, "shuffle", epoch)
        sums = np.zeros(3)
        count = 0
        for step, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            inputs = feed(idx, epoch, step)
            if cfg.lr > 0:
                outs = gradient(graph, inputs, wrt=params, output="loss")["__outputs__"]
                t += 1
                adam_step(params, cfg.lr, t=t)
            else:
                outs = evaluate(graph, inputs)
            stats = extra_stats(len(idx), outs)
            sums += np.asarray(stats) * len(idx)
            count += len(idx)
        rate, mse, loss = sums / count
        log.records.append(EpochRecord(epoch, float(rate), float(mse), float(loss), time.perf_counter() - t0))
    return log


def _codec_graph(codec, cfg: TrainConfig, rows_per_sample: int, conditional: bool):
    g = Graph(f"train-{codec.name}", dtype=codec.dtype)
    d = codec.d
    x = g.input("x", (None, d))
    noise = g.input("noise", (None, codec.latent_dim))
    if conditional:
        cond = g.input("cond", (None, d))
        out = codec.train_nodes(g, x, noise, cond)
    else:
        out = codec.train_nodes(g, x, noise)
    nrows = g.input("inv_elements", ())  # 1 / (rows * D) of the batch
    rate_per_element = g.mul(out["rate"], nrows)
    scale = float(np.sqrt(cfg.distortion_scale))
    loss = rd_loss_nodes(g, g.scale(x, scale), g.scale(out["xhat"], scale), rate_per_element, cfg.lam)
    g.output("loss", loss)
    g.output("rate", out["rate"])
    g.output("mse", g.reduce_mean(g.square(x - out["xhat"])))
    return g


def _train_codec(codec, cfg: TrainConfig, targets: np.ndarray, conds: np.ndarray | None) -> TrainLog:
    n, q, d = targets.shape
    dz = codec.latent_dim
    graph = _codec_graph(codec, cfg, q, conds is not None)
    params = codec.params
    prior = getattr(codec, "entropy", None)  # conditional codecs predict their prior instead
    if prior is not None:
        for p in prior.params:
            p.lr_scale = cfg.prior_lr_scale
    dtype = codec.dtype
    targets = targets.astype(dtype)
    conds = None if conds is None else conds.astype(dtype)

    def feed(idx, epoch, step):
        rows = len(idx) * q
        nrng = make_rng(cfg.seed, "noise", epoch, step)
        inputs = {
            "x": targets[idx].reshape(rows, d),
            "noise": nrng.uniform(-0.5, 0.5, size=(rows, dz)).astype(dtype),
            "inv_elements": np.array(1.0 / (rows * d), dtype=dtype),
        }
        if conds is not None:
            inputs["cond"] = conds[idx].reshape(rows, d)
        return inputs

    def stats(nb, out):
        # rate / mse of the batch just seen, before its update
        return float(out["rate"]) / nb, float(out["mse"]), float(out["loss"])

    return _run(cfg, params, graph, n, feed, stats)


def _train_frontend(fe: Frontend, cfg: TrainConfig, camera, lidar, labels, activity: float) -> TrainLog:
    n, q, d = camera.shape
    g = Graph("train-frontend", dtype=fe.params[0].tensor.dtype)
    y1 = g.input("camera", (None, d))
    y2 = g.input("lidar", (None, d))
    onehot = g.input("onehot", (None, fe.classes + 1))
    z = fe.fusion(g, y1, y2)
    logp = g.log_softmax(fe.head(g, z))
    ce = g.neg(g.reduce_mean(g.reduce_sum(g.mul(logp, onehot), axis=-1)))
    loss = ce + g.scale(g.reduce_mean(g.square(z)), activity) if activity > 0 else ce
    g.output("loss", loss)
    rows_cell = np.arange(q) % fe.cells
    dtype = g.dtype
    eye = np.eye(fe.classes + 1, dtype=dtype)
    camera, lidar = camera.astype(dtype), lidar.astype(dtype)

    def feed(idx, epoch, step):
        rows = len(idx) * q
        return {"camera": camera[idx].reshape(rows, d), "lidar": lidar[idx].reshape(rows, d),
                "onehot": eye[labels[idx][:, rows_cell]].reshape(rows, -1)}

    return _run(cfg, fe.params, g, n, feed, lambda nb, out: (0.0, 0.0, float(out["loss"])))


def train_stage(cfg: TrainConfig, data, frozen: dict | None = None, model=None):
    """Train one stage; returns (model, TrainLog).

    * ``task-head``: ``data`` = dict(camera, lidar, labels) arrays; trains fusion + head.
    * ``anf``: ``data`` = (N, Q, D) training maps.
    * ``cond``: ``data`` = (targets, predictor inputs); ``frozen["predictor"]``
      must hold the trained unconditional codec, whose decoded output is the
      condition.

    ``frozen["frontend"]``, when given, is checked to be untouched.
    """
    cfg.validate()
    frozen = frozen or {}
    frontend = frozen.get("frontend")
    before = frontend.checksum() if frontend is not None else None

    if cfg.stage == "task-head":
        labels = np.asarray(data["labels"])
        cells = labels.shape[1]
        camera = np.asarray(data["camera"])
        fe = model or Frontend(camera.shape[2], int(data.get("classes", labels.max())), cells, seed=cfg.seed)
        log = _train_frontend(fe, cfg, camera, np.asarray(data["lidar"]), labels,
                              float(data.get("activity_penalty", 0.0)))
        return fe, log

    if cfg.stage == "anf":
        targets = np.asarray(data)
        n, q, d = targets.shape
        codec = model or AnfCodec(q, d, seed=cfg.seed, name="anf")
        conds = None
    else:
        predictor = frozen.get("predictor")
        if predictor is None:
            raise ConfigError("cond stage needs a trained predictor codec (train the anf stage first)")
        targets, pred_inputs = (np.asarray(a) for a in data)
        n, q, d = targets.shape
        conds = np.stack([predictor.roundtrip(p) for p in pred_inputs])
        codec = model or CondCodec(q, d, seed=cfg.seed, name="cond")
    codec.meta.update({"lam": cfg.lam, "lambda_index": cfg.lambda_index, "train": cfg.to_dict()})
    log = _train_codec(codec, cfg, targets, conds)
    if frontend is not None and frontend.checksum() != before:
        raise RuntimeError("front-end parameters changed during codec training")
    return codec, log
