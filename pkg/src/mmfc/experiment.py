"""End-to-end experiment: dataset, frozen front-end, codec sweeps, curves, reports.

Trained models live in ``<root>/models`` next to a JSON sidecar holding the
hash of everything that determines them (data config, training config,
upstream models).  A model whose sidecar matches is loaded instead of being
retrained, so the CLI stages and the full evaluation share checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .codec_anf import compress, decompress, load_codec
from .codec_cond import cond_compress, cond_decompress
from .evaluation import (
    KB,
    RDCurve,
    RDPoint,
    TimingReport,
    bd_rate,
    compare_topologies,
    format_table,
    points_csv,
    summarize_times,
)
from .featuremap import FeatureMap
from .ndgrad import ConfigError
from .pipeline.data import DataConfig, PairConfig, correlated_pair, generate_scene, modality_features, world_for
from .pipeline.frontend import Frontend
from .pipeline.metrics import mean_average_precision
from .pipeline.topologies import ROLES, TopologyModels, run_topology
from .rng import make_rng
from .training import FRONTEND_DEFAULTS, EpochRecord, TrainConfig, TrainLog, train_stage

# (topology, case) of every reported curve
CURVES = (("a1", None), ("a2", 1), ("a2", 2), ("a3", 1))


def curve_key(topology: str, case: int | None) -> str:
    """a1, a2c1, a2c2, a3 (approach 3 exists in case 1 only)."""
    return f"{topology}c{case}" if topology == "a2" else topology


def curve_filename(topology: str, case: int | None) -> str:
    return f"curve_{topology}_{case or 0}.csv"


class DependencyError(RuntimeError):
    """A required upstream model or dataset is missing."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: TrainConfig = field(default_factory=TrainConfig)
    frontend: TrainConfig = FRONTEND_DEFAULTS
    seed: int = 0
    timing_samples: int = 200
    pair: PairConfig = field(default_factory=PairConfig)
    pair_rhos: tuple = (0.9, 0.0)
    pair_train: int = 1000
    pair_test: int = 200

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "codec": self.codec.to_dict(), "frontend": self.frontend.to_dict(),
                "seed": self.seed, "timing_samples": self.timing_samples, "pair": asdict(self.pair),
                "pair_rhos": list(self.pair_rhos), "pair_train": self.pair_train, "pair_test": self.pair_test}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}; allowed: {sorted(known)}")
        kw = {}
        try:
            if "data" in data:
                kw["data"] = DataConfig.from_dict(data["data"])
            if "codec" in data:
                kw["codec"] = TrainConfig.from_dict({**TrainConfig().to_dict(), **data["codec"]})
            if "frontend" in data:
                kw["frontend"] = TrainConfig.from_dict({**FRONTEND_DEFAULTS.to_dict(), **data["frontend"]})
            if "pair" in data:
                known_p = {f.name for f in fields(PairConfig)}
                if set(data["pair"]) - known_p:
                    raise ConfigError(f"unknown pair keys: {sorted(set(data['pair']) - known_p)}")
                kw["pair"] = PairConfig(**data["pair"])
            if "pair_rhos" in data:
                kw["pair_rhos"] = tuple(float(r) for r in data["pair_rhos"])
            for k in ("seed", "timing_samples", "pair_train", "pair_test"):
                if k in data:
                    if not isinstance(data[k], int) or data[k] < 0:
                        raise ConfigError(f"{k} must be a non-negative integer, got {data[k]!r}")
                    kw[k] = data[k]
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cls(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset -----------------------------------------------------------------


def split_seeds(cfg: DataConfig, seed: int) -> dict[str, np.ndarray]:
    n = cfg.n_train + cfg.n_test
    seeds = make_rng(seed, "dataset").choice(2**62, size=n, replace=False).astype(np.uint64)
    return {"train": seeds[:cfg.n_train], "test": seeds[cfg.n_train:]}


@dataclass
class Split:
    scenes: list
    camera: np.ndarray  # (N, Q, D)
    lidar: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.scenes]) if self.scenes else np.zeros((0, 0), int)

    def __len__(self):
        return len(self.scenes)


def build_split(cfg: DataConfig, seeds) -> Split:
    world = world_for(cfg)
    scenes, cam, lid = [], [], []
    for s in seeds:
        scene = generate_scene(int(s), cfg)
        scenes.append(scene)
        cam.append(modality_features(scene, "camera", cfg, world).values)
        lid.append(modality_features(scene, "lidar", cfg, world).values)
    shape = (0, cfg.q, cfg.d)
    return Split(scenes, np.stack(cam) if cam else np.zeros(shape, np.float32),
                 np.stack(lid) if lid else np.zeros(shape, np.float32))


@lru_cache(maxsize=4)
def _dataset(cfg: DataConfig, seed: int) -> dict[str, Split]:
    return {k: build_split(cfg, v) for k, v in split_seeds(cfg, seed).items()}


def manifest_records(cfg: DataConfig, seed: int) -> list[dict]:
    return [{"seed": int(s), "split": name} for name, seeds in split_seeds(cfg, seed).items() for s in seeds]


# -- model store -------------------------------------------------------------


class Experiment:
    def __init__(self, cfg: ExperimentConfig, root, jobs: int = 1, log=None):
        self.cfg = cfg
        self.root = Path(root)
        self.jobs = max(1, int(jobs))
        self.log = log or (lambda msg: None)
        self._cache: dict[str, object] = {}

    @property
    def lambda_grid(self) -> tuple:
        return tuple(self.cfg.codec.lambda_grid)

    def data(self) -> dict[str, Split]:
        return _dataset(self.cfg.data, self.cfg.seed)

    def model_path(self, name: str) -> Path:
        return self.root / "models" / f"{name}.bin"

    # keys: everything that determines a model
    def key(self, name: str) -> dict:
        c = self.cfg
        base = {"version": __version__, "data": c.data.to_dict(), "seed": c.seed}
        if name == "frontend":
            return {**base, "train": c.frontend.to_dict()}
        kind, role, li, *rest = name.split("_")
        lam = self.lambda_grid[int(li[1:])]
        train = replace(c.codec, lam=lam, seed=c.seed, stage=kind).to_dict()
        k = {**base, "train": train, "role": role}
        if role == "fused":
            k["frontend"] = self.key("frontend")
        if kind == "cond":
            k["predictor"] = self.key(self.predictor_name(role, int(rest[0][1:])))
        return k

    @staticmethod
    def predictor_name(target: str, j: int) -> str:
        other = "camera" if target == "lidar" else "lidar"
        return f"anf_{other}_l{j}"

    def _sidecar(self, name: str) -> Path:
        return self.root / "models" / f"{name}.json"

    def is_fresh(self, name: str) -> bool:
        side, path = self._sidecar(name), self.model_path(name)
        if not (side.exists() and path.exists()):
            return False
        meta = json.loads(side.read_text())
        return meta.get("key") == config_hash(self.key(name)) and meta.get("sha256") == sha256_file(path)

    def load(self, name: str):
        if name in self._cache:
            return self._cache[name]
        if not self.is_fresh(name):
            raise DependencyError(f"model {name!r} is missing or stale under {self.root / 'models'}")
        data = self.model_path(name).read_bytes()
        model = Frontend.load(data) if name == "frontend" else load_codec(data)
        self._cache[name] = model
        return model

    def _store(self, name: str, model, log: TrainLog):
        blob = model.to_bytes()
        atomic_write(self.model_path(name), blob)
        atomic_write(self.root / "models" / f"{name}.log.csv", log.to_csv())
        side = {"key": config_hash(self.key(name)), "sha256": hashlib.sha256(blob).hexdigest(),
                "config": self.key(name), "final_loss": float(log.losses[-1]),
                "seconds": float(sum(r.seconds for r in log.records))}
        atomic_write(self._sidecar(name), json.dumps(side, indent=1, sort_keys=True))
        self._cache[name] = model

    def train_log(self, name: str) -> TrainLog:
        rows = list(csv.DictReader((self.root / "models" / f"{name}.log.csv").open()))
        return TrainLog([EpochRecord(int(r["epoch"]), float(r["rate_bits"]), float(r["mse"]), float(r["loss"]),
                                     float(r["seconds"])) for r in rows])

    # -- training
    def frontend(self, train: bool = True) -> Frontend:
        name = "frontend"
        if self.is_fresh(name) or not train:
            return self.load(name)
        self.log("training front-end")
        tr = self.data()["train"]
        fe, log = train_stage(replace(self.cfg.frontend, seed=self.cfg.seed),
                              dict(camera=tr.camera, lidar=tr.lidar, labels=tr.labels, classes=self.cfg.data.classes))
        self._store(name, fe, log)
        return fe

    def fused(self, split: str) -> np.ndarray:
        key = f"__fused_{split}"
        if key not in self._cache:
            fe = self.frontend(train=False)
            s = self.data()[split]
            self._cache[key] = np.stack([fe.fusion.apply(a, b) for a, b in zip(s.camera, s.lidar)]).astype(np.float32)
        return self._cache[key]

    def model(self, name: str, train: bool = True):
        """Load ``name`` or train it (and, if ``train``, anything upstream)."""
        if self.is_fresh(name):
            return self.load(name)
        if not train:
            raise DependencyError(f"model {name!r} has not been trained")
        if name == "frontend":
            return self.frontend()
        kind, role, li, *rest = name.split("_")
        i = int(li[1:])
        cfg = replace(self.cfg.codec, lam=self.lambda_grid[i], seed=self.cfg.seed, stage=kind)
        tr = self.data()["train"]
        t0 = time.perf_counter()
        if kind == "anf":
            if role == "fused":
                self.frontend()
                data = self.fused("train")
            else:
                data = getattr(tr, role)
            codec, log = train_stage(cfg, data, {"frontend": self._cache.get("frontend")})
        else:
            pname = self.predictor_name(role, int(rest[0][1:]))
            predictor = self.model(pname, train)
            other = "camera" if role == "lidar" else "lidar"
            codec, log = train_stage(cfg, (getattr(tr, role), getattr(tr, other)), {"predictor": predictor})
        codec.meta["role"] = role
        self.log(f"trained {name} in {time.perf_counter() - t0:.1f}s (final loss {log.losses[-1]:.4f})")
        self._store(name, codec, log)
        return codec

    def names_for(self, topology: str, case: int | None, i: int) -> dict[str, str]:
        if topology == "a1":
            return {"codec": f"anf_fused_l{i}"}
        first, second = ROLES[topology]
        j = 0 if case in (None, 1) else i
        return {"predictor": f"anf_{first}_l{j}", "conditional": f"cond_{second}_l{i}_p{j}"}

    def models_for(self, topology: str, case: int | None, i: int, train: bool = True) -> TopologyModels:
        fe = self.frontend(train) if train else self.load("frontend")
        named = {k: self.model(v, train) for k, v in self.names_for(topology, case, i).items()}
        return TopologyModels(frontend=fe, **named)

    def sweep(self, topology: str, case: int | None, indices=None) -> list[str]:
        """Train every model of one curve; independent codecs run on ``jobs`` workers."""
        indices = range(len(self.lambda_grid)) if indices is None else indices
        self.frontend()
        names = [self.names_for(topology, case, i) for i in indices]
        stages = [sorted({n["codec"] for n in names})] if topology == "a1" else [
            sorted({n["predictor"] for n in names}), sorted({n["conditional"] for n in names})]
        for group in stages:
            todo = [n for n in group if not self.is_fresh(n)]
            if self.jobs > 1 and len(todo) > 1:
                with ProcessPoolExecutor(min(self.jobs, len(todo))) as pool:
                    list(pool.map(_train_remote, [(self.cfg, str(self.root), n) for n in todo]))
            for n in group:
                self.model(n)
        return [v for n in names for v in n.values()]

    # -- evaluation
    def ceiling(self) -> float:
        fe = self.frontend(train=False)
        te = self.data()["test"]
        preds = [fe.predict(z) for z in self.fused("test")]
        return mean_average_precision(preds, te.scenes).map_percent

    def evaluate_point(self, topology: str, case: int | None, i: int) -> dict:
        models = self.models_for(topology, case, i, train=False)
        te = self.data()["test"]
        bits, sq, preds = [], [], []
        stream_bits = []
        for scene, cam, lid in zip(te.scenes, te.camera, te.lidar):
            res = run_topology(topology, (FeatureMap(cam, "camera"), FeatureMap(lid, "lidar")), models)
            bits.append(res.rate_bits)
            stream_bits.append([8 * len(s) for s in res.streams])
            preds.append(res.prediction)
            if topology == "a1":
                z = models.frontend.fusion.apply(cam, lid)
                sq.append(np.mean((res.reconstruction.values - z) ** 2))
            else:
                sq.append(0.5 * (np.mean((res.decoded["camera"].values - cam) ** 2)
                                 + np.mean((res.decoded["lidar"].values - lid) ** 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = mean_average_precision(preds, te.scenes)
        return {"topology": topology, "case": case, "lambda": self.lambda_grid[i], "lambda_index": i,
                "rate_bits": float(np.mean(bits)), "stream_bits": np.mean(stream_bits, axis=0).tolist(),
                "map_percent": m.map_percent, "mse": float(np.mean(sq)),
                "raw_bits": float(8 * 4 * cam.size * (1 if topology == "a1" else 2))}

    def curve(self, topology: str, case: int | None, train: bool = True) -> tuple[RDCurve | None, list[dict]]:
        """Evaluate every lambda of one topology.  The curve is None when the
        points do not form a valid curve (rates not strictly increasing)."""
        if train:
            self.sweep(topology, case)
        rows = [self.evaluate_point(topology, case, i) for i in range(len(self.lambda_grid))]
        return rows_to_curve(rows, curve_key(topology, case)), rows

    # -- timing
    def timing(self, topology: str, use_case: str, n: int | None = None, i: int | None = None) -> TimingReport:
        n = self.cfg.timing_samples if n is None else n
        i = len(self.lambda_grid) - 1 if i is None else i
        models = self.models_for(topology, 1 if topology != "a1" else None, i, train=False)
        seeds = split_seeds(self.cfg.data, self.cfg.seed)["test"]
        seeds = np.resize(seeds, n) if n else seeds[:0]
        return timing_bench(models, topology, use_case, seeds, self.cfg.data)


def _train_remote(args):
    cfg, root, name = args
    Experiment(cfg, root).model(name)
    return name


def rows_to_curve(rows: list[dict], label: str) -> RDCurve | None:
    pts = [RDPoint(r["rate_bits"], r["map_percent"], r["lambda"], r["topology"], r["case"]) for r in rows]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return RDCurve(pts, label)
    except ValueError:
        return None


# -- timing -----------------------------------------------------------------

USE_CASES = ("on-board", "edge-cloud")


def encode_on_board(topology: str, sample, models: TopologyModels) -> list[bytes]:
    """What the vehicle runs in the edge-cloud case: encoders only, plus the
    predictor decoder needed to condition the second stream."""
    y1, y2 = sample
    if topology == "a1":
        return [compress(models.codec, models.frontend.fuse(y1, y2), approach=1).to_bytes()]
    first, second = ROLES[topology]
    y = {"camera": y1, "lidar": y2}
    approach = 2 if topology == "a2" else 3
    bs1 = compress(models.predictor, y[first], approach=approach)
    yhat1 = decompress(models.predictor, bs1, first)
    bs2 = cond_compress(models.conditional, y[second], yhat1, approach=approach)
    return [bs1.to_bytes(), bs2.to_bytes()]


def timing_bench(models: TopologyModels, topology: str, use_case: str, seeds, cfg: DataConfig) -> TimingReport:
    """Wall-clock seconds per sample, feature generation included."""
    if use_case not in USE_CASES:
        raise ValueError(f"use case must be one of {USE_CASES}")
    seeds = list(seeds)
    if not seeds:
        return summarize_times(topology, use_case, [])
    world = world_for(cfg)

    def once(seed):
        scene = generate_scene(int(seed), cfg)
        sample = (modality_features(scene, "camera", cfg, world), modality_features(scene, "lidar", cfg, world))
        if use_case == "on-board":
            run_topology(topology, sample, models, predict=True)
        else:
            encode_on_board(topology, sample, models)

    once(seeds[0])  # warm caches and compiled kernels
    times = []
    for s in seeds:
        t0 = time.perf_counter()
        once(s)
        times.append(time.perf_counter() - t0)
    return summarize_times(topology, use_case, times)


# -- conditional-coding property on correlated pairs --------------------------


def pair_split(pcfg: PairConfig, seed: int, split: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    pred, tgt = [], []
    for k in range(n):
        p, t = correlated_pair(int(make_rng(seed, "pairs", split, k).integers(2**62)), pcfg)
        pred.append(p.values)
        tgt.append(t.values)
    return np.stack(pred), np.stack(tgt)


def psnr(x, xhat, peak: float = 2.0) -> float:
    """PSNR in dB for maps bounded in [-1, 1] (peak-to-peak 2)."""
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(xhat, np.float64)) ** 2))
    return 10.0 * np.log10(peak * peak / max(mse, 1e-12))


def conditional_gain(cfg: ExperimentConfig, rho: float, root=None, log=None) -> dict:
    """Conditional vs. identically trained unconditional coding of one target
    modality, as BD-rate on (payload bits, PSNR) curves."""
    log = log or (lambda m: None)
    pcfg = replace(cfg.pair, rho=rho, q=cfg.data.q, d=cfg.data.d)
    ptr, ttr = pair_split(pcfg, cfg.seed, "train", cfg.pair_train)
    pte, tte = pair_split(pcfg, cfg.seed, "test", cfg.pair_test)
    grid = tuple(cfg.codec.lambda_grid)
    store = Path(root) / "pairs" if root is not None else None

    def trained(name, stage, lam, data, frozen=None):
        key = config_hash({"name": name, "pair": asdict(pcfg), "codec": cfg.codec.to_dict(), "lam": lam,
                           "n": cfg.pair_train, "seed": cfg.seed, "version": __version__})
        path = store / f"{name}-{key}.bin" if store is not None else None
        if path is not None and path.exists():
            return load_codec(path.read_bytes())
        t0 = time.perf_counter()
        tcfg = replace(cfg.codec, lam=lam, stage=stage, seed=cfg.seed)
        model, _ = train_stage(tcfg, data, frozen)
        log(f"rho={rho}: trained {name} in {time.perf_counter() - t0:.1f}s")
        if path is not None:
            atomic_write(path, model.to_bytes())
            atomic_write(path.with_suffix(".json"), json.dumps({"seconds": time.perf_counter() - t0}))
        return model

    # the condition comes from the best predictor codec of the grid
    predictor = trained("pred", "anf", grid[-1], ptr)
    conds = np.stack([predictor.roundtrip(p) for p in pte])
    rows = []
    for i, lam in enumerate(grid):
        unc = trained(f"uncond-l{i}", "anf", lam, ttr)
        con = trained(f"cond-l{i}", "cond", lam, (ttr, ptr), {"predictor": predictor})
        ub, cb, umse, cmse = [], [], [], []
        for t, c in zip(tte, conds):
            bs = compress(unc, FeatureMap(t, "lidar"), approach=1)
            rec = decompress(unc, bs).values
            ub.append(8 * len(bs.payload))
            umse.append(np.mean((rec - t) ** 2))
            bs2 = cond_compress(con, FeatureMap(t, "lidar"), c, approach=2)
            rec2 = cond_decompress(con, bs2, c).values
            cb.append(8 * len(bs2.payload))
            cmse.append(np.mean((rec2 - t) ** 2))
        rows.append({"lambda": lam, "uncond_bits": float(np.mean(ub)), "uncond_mse": float(np.mean(umse)),
                     "cond_bits": float(np.mean(cb)), "cond_mse": float(np.mean(cmse))})
    q = lambda m: 10.0 * np.log10(4.0 / m)
    result = {"rho": rho, "rows": rows, "bd_rate": None, "error": None}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            unc_curve = RDCurve.from_arrays([r["uncond_bits"] for r in rows], [q(r["uncond_mse"]) for r in rows],
                                            "unconditional", lams=grid)
            con_curve = RDCurve.from_arrays([r["cond_bits"] for r in rows], [q(r["cond_mse"]) for r in rows],
                                            "conditional", lams=grid)
        result["bd_rate"] = bd_rate(unc_curve, con_curve)
    except ValueError as e:
        result["error"] = str(e)
    return {**result,
            "empirical_corr": float(np.corrcoef(pte.ravel(), tte.ravel())[0, 1])}


# -- full run ---------------------------------------------------------------


def run_all(exp: Experiment, topologies=("a1", "a2", "a3"), timing: bool = True, pairs: bool = True,
            train: bool = True) -> dict:
    """Evaluate every curve (training missing models when ``train``) and return the summary.

    Without ``train``, curves whose models are missing are listed as absent.
    """
    exp.frontend(train)
    curves, rows, absent, invalid = {}, {}, [], []
    for topo, case in CURVES:
        if topo not in topologies:
            continue
        key = curve_key(topo, case)
        exp.log(f"curve {key}")
        try:
            curve, rows[key] = exp.curve(topo, case, train)
        except DependencyError as e:
            warnings.warn(f"curve {key} absent: {e}", stacklevel=2)
            absent.append(key)
            continue
        if curve is None:
            warnings.warn(f"curve {key}: rates do not increase with lambda; excluded from BD-rate", stacklevel=2)
            invalid.append(key)
        else:
            curves[key] = curve
    summary = {"version": __version__, "config": exp.cfg.to_dict(), "ceiling_map": exp.ceiling(),
               "raw_bits": {"a1": 8 * 4 * exp.cfg.data.q * exp.cfg.data.d}, "curves": rows,
               "absent": absent, "invalid": invalid, "kbyte": f"{KB} bytes"}
    if "a2c1" in curves:
        comp = compare_topologies(curves, strict=False)
        summary["comparison"] = comp
        summary["table"] = format_table(comp)
    else:
        summary["comparison"] = None
        warnings.warn("anchor curve a2c1 absent; BD-rate comparison skipped", stacklevel=2)
    if timing:
        present = {k[:2] for k in rows}
        summary["timing"] = [asdict(exp.timing(t, u)) for t in topologies if t in present for u in USE_CASES]
    if pairs:
        summary["conditional_gain"] = [conditional_gain(exp.cfg, rho, exp.root, exp.log) for rho in exp.cfg.pair_rhos]
    return summary


def write_reports(exp: Experiment, summary: dict, out) -> list[Path]:
    """CSV per curve, summary.json, console table and figures."""
    from .plotting import plot_feature_maps, plot_rate_map, plot_training_logs

    out = Path(out)
    written = []
    curves = {}
    for topo, case in CURVES:
        key = curve_key(topo, case)
        if key not in summary["curves"]:
            continue
        rows = summary["curves"][key]
        pts = [RDPoint(r["rate_bits"], r["map_percent"], r["lambda"], topo, case) for r in rows]
        curves[key] = ([p.rate for p in pts], [p.quality for p in pts])
        p = out / curve_filename(topo, case)
        atomic_write(p, points_csv(pts))
        written.append(p)
    p = out / "summary.json"
    atomic_write(p, json.dumps(summary, indent=1, sort_keys=True, default=float))
    written.append(p)
    if summary.get("table"):
        p = out / "bd_rate_table.txt"
        atomic_write(p, summary["table"] + "\n")
        written.append(p)
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    written.append(plot_rate_map(curves, summary["ceiling_map"], figs / "rate_map.png"))
    te = exp.data()["test"]
    if len(te):
        written.append(plot_feature_maps(te.camera[0], te.lidar[0], figs / "feature_maps.png"))
    logs = {}
    for name in sorted(p.stem[:-4] for p in (exp.root / "models").glob("*.log.csv")):
        logs[name] = exp.train_log(name)
    if logs:
        written.append(plot_training_logs(logs, figs / "training_loss.png"))
    return written
