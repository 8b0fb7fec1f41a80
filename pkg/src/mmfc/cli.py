"""``mmfc`` command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 missing dependency (dataset or
upstream checkpoint), 4 data integrity (hash, digest or payload corruption).
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bitstream import Bitstream, BitstreamError
from .codec_anf import decompress
from .codec_cond import cond_decompress
from .entropy import DecodeError
from .experiment import (
    DependencyError,
    Experiment,
    ExperimentConfig,
    atomic_write,
    config_hash,
    encode_on_board,
    manifest_records,
    run_all,
    sha256_file,
    write_reports,
)
from .featuremap import FeatureMap
from .ndgrad import CheckpointError, ConfigError
from .pipeline.topologies import ROLES

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INTEGRITY = 0, 2, 3, 4

log = logging.getLogger("mmfc")


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


# -- helpers -------------------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    out = Path(args.out)
    path = Path(args.config) if args.config else out / "config.json"
    data = {}
    if args.config or path.exists():
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    cfg = ExperimentConfig.from_dict(data)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def write_manifest(out: Path, cfg: ExperimentConfig):
    arts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            arts[str(p.relative_to(out))] = sha256_file(p)
    m = RunManifest(cfg.to_dict(), {"experiment": cfg.seed, "config_hash": config_hash(cfg.to_dict())}, arts)
    atomic_write(out / "manifest.json", m.to_json())


def require_dataset(out: Path, cfg: ExperimentConfig):
    ds = out / "dataset.jsonl"
    if not ds.exists():
        raise DependencyError(f"no dataset in {out}; run `mmfc gen-data --out {out}` first")
    snap = out / "config.json"
    if snap.exists() and json.loads(snap.read_text()).get("data") != cfg.data.to_dict():
        raise ConfigError("data config differs from the one the dataset was generated with")


def lambda_indices(args, cfg: ExperimentConfig) -> list[int]:
    grid = list(cfg.codec.lambda_grid)
    if getattr(args, "sweep", False):
        return list(range(len(grid)))
    if args.lam is None:
        raise ConfigError("give --lambda L or --sweep")
    for i, g in enumerate(grid):
        if np.isclose(args.lam, g):
            return [i]
    raise ConfigError(f"lambda {args.lam} is not in the grid {grid}")


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    records = manifest_records(cfg.data, cfg.seed)
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    atomic_write(out / "dataset.jsonl", "".join(json.dumps(r) + "\n" for r in records))
    write_manifest(out, cfg)
    n_train = sum(r["split"] == "train" for r in records)
    print(f"wrote {len(records)} samples ({n_train} train / {len(records) - n_train} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    require_dataset(out, cfg)
    exp = Experiment(cfg, out, jobs=args.jobs, log=log.info)
    if args.stage == "task-head":
        exp.frontend()
        names = ["frontend"]
    else:
        topo = args.topology or ("a1" if args.stage == "anf" else "a2")
        idx = lambda_indices(args, cfg)
        if args.stage == "anf":
            if topo == "a1" and not exp.is_fresh("frontend"):
                raise DependencyError("approach 1 codes fused maps: train --stage task-head first")
            role = "fused" if topo == "a1" else ROLES[topo][0]
            names = [f"anf_{role}_l{i}" for i in idx]
        else:
            if topo == "a1":
                raise ConfigError("approach 1 has no conditional stage")
            case = args.case or 1
            if topo == "a3" and case != 1:
                raise ConfigError("approach 3 is built with case 1 pairing only")
            names = []
            for i in idx:
                n = exp.names_for(topo, case, i)
                if not exp.is_fresh(n["predictor"]):
                    raise DependencyError(f"predictor checkpoint {n['predictor']} missing: "
                                          f"train --stage anf --topology {topo} first")
                names.append(n["conditional"])
        for name in names:
            exp.model(name)
    write_manifest(out, cfg)
    for name in names:
        print(exp.model_path(name))
    return EXIT_OK


def _load_sample(args, exp: Experiment) -> tuple[FeatureMap, FeatureMap]:
    if args.input and Path(args.input).suffix == ".npz":
        with np.load(args.input) as f:
            return FeatureMap(f["camera"], "camera"), FeatureMap(f["lidar"], "lidar")
    te = exp.data()["test"]
    k = int(args.sample or 0)
    if not 0 <= k < len(te):
        raise ConfigError(f"sample index {k} outside the test split (size {len(te)})")
    return FeatureMap(te.camera[k], "camera"), FeatureMap(te.lidar[k], "lidar")


def stream_paths(stem: str, topology: str) -> list[Path]:
    roles = ["fused"] if topology == "a1" else list(ROLES[topology])
    return [Path(f"{stem}.{r}.mmfc") for r in roles]


def cmd_codec(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    exp = Experiment(cfg, out, log=log.info)
    topo = args.topology or "a1"
    if args.action == "encode":
        require_dataset(out, cfg)
        if args.lam is None:
            i = len(cfg.codec.lambda_grid) - 1
        else:
            (i,) = lambda_indices(args, cfg)
        case = None if topo == "a1" else (args.case or 1)
        models = exp.models_for(topo, case, i, train=False)
        y1, y2 = _load_sample(args, exp)
        paths = stream_paths(args.output, topo)
        blobs = encode_on_board(topo, (y1, y2), models)
        for p, b in zip(paths, blobs):
            atomic_write(p, b)
            print(f"{p} {8 * len(b)} bits")
        print(f"total {sum(8 * len(b) for b in blobs)} bits")
        return EXIT_OK

    # decode: the headers say which models were used
    paths = stream_paths(args.input, topo)
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"stream file(s) not found: {', '.join(map(str, missing))}")
    streams = []
    for p in paths:
        try:
            streams.append(Bitstream.from_bytes(p.read_bytes()))
        except BitstreamError as e:
            raise BitstreamError(f"{p}: {e}") from e
    fe = exp.load("frontend")
    result = {}
    if topo == "a1":
        codec = exp.load(f"anf_fused_l{streams[0].lambda_index}")
        z = decompress(codec, streams[0], "fused")
    else:
        first, second = ROLES[topo]
        j, i = streams[0].lambda_index, streams[1].lambda_index
        names = {"predictor": f"anf_{first}_l{j}", "conditional": f"cond_{second}_l{i}_p{j}"}
        yhat1 = decompress(exp.load(names["predictor"]), streams[0], first)
        yhat2 = cond_decompress(exp.load(names["conditional"]), streams[1], yhat1)
        result = {first: yhat1.values, second: yhat2.values}
        z = fe.fuse(result["camera"], result["lidar"])
    result["fused"] = z.values
    result["scores"] = fe.predict(z).scores
    target = Path(args.output)
    if target.suffix != ".npz":
        target = target.with_suffix(".npz")
    buf = io.BytesIO()
    np.savez(buf, **result)
    atomic_write(target, buf.getvalue())
    print(target)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    if args.timing_samples is not None:
        cfg = replace(cfg, timing_samples=args.timing_samples)
    out = Path(args.out)
    require_dataset(out, cfg)
    exp = Experiment(cfg, out, jobs=args.jobs, log=log.info)
    if not args.train and not exp.is_fresh("frontend"):
        raise DependencyError("no trained front-end: run `mmfc train --stage task-head` or pass --train")
    topologies = tuple(args.topology_list or ("a1", "a2", "a3"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # absent curves are reported below
        summary = run_all(exp, topologies, timing=not args.no_timing, pairs=not args.no_pairs, train=args.train)
    report_dir = out / "report"
    written = write_reports(exp, summary, report_dir)
    for key in summary.get("absent", []):
        print(f"warning: curve {key} absent (models not trained)", file=sys.stderr)
    for key in summary.get("invalid", []):
        print(f"warning: curve {key} has rates that do not increase with lambda; no BD-rate", file=sys.stderr)
    if summary.get("table"):
        print(summary["table"])
    print(f"no-compression ceiling mAP {summary['ceiling_map']:.2f}%")
    for t in summary.get("timing", []):
        print(f"timing {t['topology']} {t['use_case']:<10} {t['mean_seconds'] * 1e3:8.2f} ms/sample "
              f"(sd {t['std_seconds'] * 1e3:.2f}, n={t['samples']})")
    for g in summary.get("conditional_gain", []):
        val = f"{g['bd_rate']:+.2f}%" if g["bd_rate"] is not None else f"unavailable ({g['error']})"
        print(f"conditional vs unconditional, rho={g['rho']}: BD-rate {val}")
    print(f"wrote {len(written)} files to {report_dir}")
    write_manifest(out, cfg)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: <out>/config.json if present)")
    common.add_argument("--seed", type=int, help="experiment seed; all randomness derives from it")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--out", default="mmfc-run", help="workspace directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmfc", description="Multimodal feature compression experiments.")
    p.add_argument("--version", action="version", version=f"mmfc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the dataset manifest")

    t = sub.add_parser("train", parents=[common], help="train a stage")
    t.add_argument("--stage", required=True, choices=("task-head", "anf", "cond"))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--sweep", action="store_true", help="train every lambda of the grid")
    t.add_argument("--topology", choices=("a1", "a2", "a3"))
    t.add_argument("--case", type=int, choices=(1, 2))

    c = sub.add_parser("codec", parents=[common], help="encode or decode one sample")
    c.add_argument("action", choices=("encode", "decode"))
    c.add_argument("--topology", choices=("a1", "a2", "a3"))
    c.add_argument("--lambda", dest="lam", type=float)
    c.add_argument("--case", type=int, choices=(1, 2))
    c.add_argument("--input", help="encode: .npz with camera/lidar arrays; decode: stream file stem")
    c.add_argument("--sample", type=int, help="encode test-split sample with this index")
    c.add_argument("--output", required=True, help="encode: stream file stem; decode: .npz path")

    e = sub.add_parser("eval", parents=[common], help="curves, BD-rate table, timing and figures")
    e.add_argument("--topology", dest="topology_list", action="append", choices=("a1", "a2", "a3"))
    e.add_argument("--train", action="store_true", help="train missing models instead of reporting them absent")
    e.add_argument("--no-timing", action="store_true")
    e.add_argument("--no-pairs", action="store_true", help="skip the correlated-pair conditional-gain study")
    e.add_argument("--timing-samples", type=int)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "codec": cmd_codec, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, CheckpointError) as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (BitstreamError, DecodeError) as e:
        print(f"data integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
