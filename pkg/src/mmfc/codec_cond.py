"""Conditional flow codec: codes a target map given a decoded predictor map.

The predictor row enters every coupling network (concatenated on the last
dimension) and also sets the per-row logistic prior through a small
condition network.
"""

from __future__ import annotations

import json

import numpy as np

from . import entropy
from .bitstream import ROLE_IDS, ROLE_NAMES, Bitstream, condition_digest
from .codec_anf import N_STEPS, AnfStep, CodecMismatchError, _decode_payload
from .featuremap import FeatureMap, as_values
from .ndgrad import MLP, Graph, Node, Parameter, default_dtype, parameters_to_bytes
from .rng import fnv1a64, make_rng


class CondCodec:
    kind = "cond"

    def __init__(self, q: int, d: int, latent_dim: int | None = None, seed: int = 0,
                 name: str = "cond", dtype=None):
        self.q, self.d = int(q), int(d)
        self.latent_dim = int(latent_dim or max(1, d // 4))
        self.name = name
        self.seed = seed
        self.dtype = np.dtype(dtype or default_dtype())
        self.meta: dict = {}
        rng = make_rng(seed, "init", name)
        dz, hid = self.latent_dim, 4 * self.latent_dim
        self.steps = [
            AnfStep(MLP(f"{name}.step{i}.enc", d + d, hid, dz, rng, self.dtype),
                    MLP(f"{name}.step{i}.dec", dz + d, hid, d, rng, self.dtype))
            for i in range(N_STEPS)
        ]
        self.prior_net = MLP(f"{name}.prior", d, hid, 2 * dz, rng, self.dtype)
        # start the prior near unit scale
        self.prior_net.l2.bias.tensor[dz:] = np.log(np.expm1(1.0))

    @property
    def params(self) -> list[Parameter]:
        out = []
        for s in self.steps:
            out += s.params
        return out + self.prior_net.params

    def _rows(self, x, width) -> np.ndarray:
        x = as_values(x).astype(self.dtype, copy=False)
        if x.shape[-1] != width:
            raise ValueError(f"feature width {x.shape[-1]} does not match codec width {width}")
        return x

    def _pair(self, x, cond):
        x = self._rows(x, self.d)
        cond = self._rows(cond, self.d)
        if x.shape != cond.shape:
            raise ValueError(f"target shape {x.shape} differs from condition shape {cond.shape}")
        return x, cond

    def forward(self, x, cond) -> tuple[np.ndarray, np.ndarray]:
        x, cond = self._pair(x, cond)
        z = np.zeros(x.shape[:-1] + (self.latent_dim,), dtype=self.dtype)
        for s in self.steps:
            z = z + s.enc_net.apply(np.concatenate([x, cond], axis=-1))
            x = x - s.dec_net.apply(np.concatenate([z, cond], axis=-1))
        return z, x

    def inverse(self, z, r, cond) -> np.ndarray:
        x, cond = self._pair(r, cond)
        z = np.asarray(z, dtype=self.dtype)
        if z.shape != x.shape[:-1] + (self.latent_dim,):
            raise ValueError(f"latent shape {z.shape} does not fit residual {x.shape}")
        for s in reversed(self.steps):
            x = x + s.dec_net.apply(np.concatenate([z, cond], axis=-1))
            z = z - s.enc_net.apply(np.concatenate([x, cond], axis=-1))
        return x

    def prior(self, cond) -> tuple[np.ndarray, np.ndarray]:
        """Per-row logistic (loc, scale) of the latent given the condition."""
        cond = self._rows(cond, self.d)
        out = self.prior_net.apply(cond)
        dz = self.latent_dim
        loc = out[..., :dz].astype(np.float64)
        scale = np.maximum(np.logaddexp(0.0, out[..., dz:].astype(np.float64)), entropy.SCALE_MIN)
        return loc, scale

    def roundtrip(self, x, cond, quantizer=np.rint) -> np.ndarray:
        z, _ = self.forward(x, cond)
        zq = quantizer(z).astype(self.dtype)
        return self.inverse(zq, np.zeros(zq.shape[:-1] + (self.d,), self.dtype), cond)

    def train_nodes(self, g: Graph, x: Node, noise: Node, cond: Node) -> dict[str, Node]:
        z = None
        xb = x
        for s in self.steps:
            upd = s.enc_net(g, g.concat(xb, cond))
            z = upd if z is None else z + upd
            xb = xb - s.dec_net(g, g.concat(z, cond))
        zt = z + noise
        out = self.prior_net(g, cond)
        dz = self.latent_dim
        loc = g.slice_last(out, 0, dz)
        scale = g.maximum(g.softplus(g.slice_last(out, dz, 2 * dz)), entropy.SCALE_MIN)
        rate = entropy.logistic_rate_nodes(g, zt, loc, scale)
        xr = None
        zr = zt
        for i, s in enumerate(reversed(self.steps)):
            upd = s.dec_net(g, g.concat(zr, cond))
            xr = upd if xr is None else xr + upd
            if i < len(self.steps) - 1:
                zr = zr - s.enc_net(g, g.concat(xr, cond))
        return {"rate": rate, "xhat": xr, "residual": xb, "latent": z}

    def model_hash(self) -> int:
        """FNV-1a over the serialized condition (prior) network."""
        return fnv1a64(parameters_to_bytes(self.prior_net.params))

    def table(self, cond) -> entropy.CdfTable:
        return entropy.build_cdf_table(self.prior(cond))

    def config(self) -> dict:
        return {"kind": self.kind, "q": self.q, "d": self.d, "latent_dim": self.latent_dim,
                "name": self.name, "seed": self.seed, "meta": self.meta}

    def to_bytes(self) -> bytes:
        sections = {"META": json.dumps(self.config(), sort_keys=True).encode()}
        return parameters_to_bytes(self.params, sections)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def cond_compress(codec: CondCodec, x, cond, approach: int, lambda_index: int | None = None) -> Bitstream:
    """``cond`` must be the *decoded* predictor so the decoder can rebuild it."""
    fm = x if isinstance(x, FeatureMap) else FeatureMap(np.asarray(x), codec.meta.get("role", "lidar"))
    cond_v = as_values(cond)
    if fm.shape != (codec.q, codec.d) or cond_v.shape != fm.shape:
        raise ValueError(f"target {fm.shape} / condition {cond_v.shape} do not match codec {(codec.q, codec.d)}")
    z, _ = codec.forward(fm.values, cond_v)
    symbols = entropy.quantize(z, "round").astype(np.int64)
    table = codec.table(cond_v)
    payload = entropy.rc_encode(symbols, table, channels=np.arange(symbols.size))
    lam = codec.meta.get("lambda_index", 0) if lambda_index is None else lambda_index
    return Bitstream(approach=approach, role=ROLE_IDS[fm.modality], lambda_index=lam, q=codec.q,
                     d=codec.d, model_hash=codec.model_hash(), payload=payload,
                     cond_digest=condition_digest(cond_v))


def cond_decompress(codec: CondCodec, bs: Bitstream, cond) -> FeatureMap:
    cond_v = as_values(cond)
    if (bs.q, bs.d) != (codec.q, codec.d) or cond_v.shape != (codec.q, codec.d):
        raise CodecMismatchError("stream, codec and condition shapes disagree", 12)
    if bs.model_hash != codec.model_hash():
        raise CodecMismatchError("model hash mismatch: condition network differs from the encoder's", 16)
    if bs.cond_digest != condition_digest(cond_v):
        raise CodecMismatchError("condition digest mismatch: predictor differs from the one used to encode", 24)
    count = codec.q * codec.latent_dim
    symbols = _decode_payload(bs, codec.table(cond_v), count, np.arange(count))
    zq = symbols.reshape(codec.q, codec.latent_dim).astype(codec.dtype)
    xhat = codec.inverse(zq, np.zeros((codec.q, codec.d), codec.dtype), cond_v)
    return FeatureMap(xhat, ROLE_NAMES[bs.role])
