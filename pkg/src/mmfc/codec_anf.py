"""Two-step augmented normalizing flow codec for Q x D feature maps.

Rows of the map are coded as independent vectors sharing one model.  The
x-branch of the flow is discarded at compression time, which is what makes
the codec lossy: decoding runs the inverse flow from the quantized latent
and a zero x-branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import entropy
from .bitstream import ROLE_IDS, ROLE_NAMES, Bitstream, BitstreamError
from .featuremap import FeatureMap, as_values
from .ndgrad import (
    MLP,
    CheckpointError,
    Graph,
    Node,
    Parameter,
    default_dtype,
    load_into,
    parameters_from_bytes,
    parameters_to_bytes,
)
from .rng import make_rng

N_STEPS = 2


class CodecMismatchError(BitstreamError):
    """Stream was produced by a different model, shape or condition."""


@dataclass
class AnfStep:
    enc_net: MLP  # x-branch -> update of z-branch
    dec_net: MLP  # z-branch -> update of x-branch

    @property
    def params(self) -> list[Parameter]:
        return self.enc_net.params + self.dec_net.params


class AnfCodec:
    kind = "anf"

    def __init__(self, q: int, d: int, latent_dim: int | None = None, seed: int = 0,
                 name: str = "anf", dtype=None):
        self.q, self.d = int(q), int(d)
        self.latent_dim = int(latent_dim or max(1, d // 4))
        self.name = name
        self.seed = seed
        self.dtype = np.dtype(dtype or default_dtype())
        self.meta: dict = {}
        rng = make_rng(seed, "init", name)
        dz, hid = self.latent_dim, 4 * self.latent_dim
        self.steps = [
            AnfStep(MLP(f"{name}.step{i}.enc", d, hid, dz, rng, self.dtype),
                    MLP(f"{name}.step{i}.dec", dz, hid, d, rng, self.dtype))
            for i in range(N_STEPS)
        ]
        self.entropy = entropy.EntropyModel(f"{name}.prior", dz, dtype=self.dtype)
        self._table_key = None
        self._table = None

    @property
    def params(self) -> list[Parameter]:
        out = []
        for s in self.steps:
            out += s.params
        return out + self.entropy.params

    # -- flow, numpy path
    def _rows(self, x) -> np.ndarray:
        x = as_values(x).astype(self.dtype, copy=False)
        if x.shape[-1] != self.d:
            raise ValueError(f"feature width {x.shape[-1]} does not match codec width {self.d}")
        return x

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._rows(x)
        z = np.zeros(x.shape[:-1] + (self.latent_dim,), dtype=self.dtype)
        for s in self.steps:
            z = z + s.enc_net.apply(x)
            x = x - s.dec_net.apply(z)
        return z, x

    def inverse(self, z, r) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        x = np.asarray(r, dtype=self.dtype)
        if z.shape[:-1] != x.shape[:-1] or z.shape[-1] != self.latent_dim or x.shape[-1] != self.d:
            raise ValueError(f"latent {z.shape} and residual {x.shape} do not fit codec")
        for s in reversed(self.steps):
            x = x + s.dec_net.apply(z)
            z = z - s.enc_net.apply(x)
        return x

    def roundtrip(self, x, quantizer=np.rint) -> np.ndarray:
        """The compress/decompress transform without entropy coding."""
        z, _ = self.forward(x)
        zq = quantizer(z).astype(self.dtype)
        return self.inverse(zq, np.zeros(zq.shape[:-1] + (self.d,), self.dtype))

    # -- graph path
    def train_nodes(self, g: Graph, x: Node, noise: Node) -> dict[str, Node]:
        """Noisy-latent training graph: rate (bits) and reconstruction."""
        z = None
        xb = x
        for s in self.steps:
            z = s.enc_net(g, xb) if z is None else z + s.enc_net(g, xb)
            xb = xb - s.dec_net(g, z)
        zt = z + noise
        loc, scale = self.entropy.nodes(g)
        rate = entropy.logistic_rate_nodes(g, zt, loc, scale)
        xr = None
        zr = zt
        for i, s in enumerate(reversed(self.steps)):
            xr = s.dec_net(g, zr) if xr is None else xr + s.dec_net(g, zr)
            if i < len(self.steps) - 1:
                zr = zr - s.enc_net(g, xr)
        return {"rate": rate, "xhat": xr, "residual": xb, "latent": z}

    # -- entropy coding
    def model_hash(self) -> int:
        return self.entropy.digest()

    def table(self) -> entropy.CdfTable:
        key = self.entropy.serialize()
        if key != self._table_key:
            self._table = entropy.build_cdf_table(self.entropy)
            self._table_key = key
        return self._table

    def latent_symbols(self, x) -> np.ndarray:
        z, _ = self.forward(x)
        return entropy.quantize(z, "round").astype(np.int64)

    # -- checkpoints
    def config(self) -> dict:
        return {"kind": self.kind, "q": self.q, "d": self.d, "latent_dim": self.latent_dim,
                "name": self.name, "seed": self.seed, "meta": self.meta}

    def to_bytes(self) -> bytes:
        sections = {"META": json.dumps(self.config(), sort_keys=True).encode(),
                    "ENTM": self.entropy.serialize()}
        return parameters_to_bytes(self.params, sections)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def compress(codec: AnfCodec, x, approach: int = 1, lambda_index: int | None = None) -> Bitstream:
    """Code the rounded latent of every row; the x-branch residual is dropped."""
    fm = x if isinstance(x, FeatureMap) else FeatureMap(np.asarray(x), codec.meta.get("role", "fused"))
    if fm.shape != (codec.q, codec.d):
        raise ValueError(f"feature map shape {fm.shape} != codec shape {(codec.q, codec.d)}")
    symbols = codec.latent_symbols(fm.values)
    payload = entropy.rc_encode(symbols, codec.table())
    lam = codec.meta.get("lambda_index", 0) if lambda_index is None else lambda_index
    return Bitstream(approach=approach, role=ROLE_IDS[fm.modality], lambda_index=lam,
                     q=codec.q, d=codec.d, model_hash=codec.model_hash(), payload=payload)


def _decode_payload(bs: Bitstream, table, count: int, channels) -> np.ndarray:
    try:
        return entropy.rc_decode(bs.payload, table, count, channels, strict=True)
    except entropy.DecodeError as e:
        off = None if e.offset is None else bs.header_size + e.offset
        raise BitstreamError(str(e), off) from e


def decompress(codec: AnfCodec, bs: Bitstream, modality: str | None = None) -> FeatureMap:
    if (bs.q, bs.d) != (codec.q, codec.d):
        raise CodecMismatchError(f"stream shape {(bs.q, bs.d)} != codec shape {(codec.q, codec.d)}", 12)
    if bs.model_hash != codec.model_hash():
        raise CodecMismatchError("model hash mismatch: stream was produced by another entropy model", 16)
    count = codec.q * codec.latent_dim
    symbols = _decode_payload(bs, codec.table(), count, None)
    zq = symbols.reshape(codec.q, codec.latent_dim).astype(codec.dtype)
    xhat = codec.inverse(zq, np.zeros((codec.q, codec.d), codec.dtype))
    return FeatureMap(xhat, modality or ROLE_NAMES[bs.role])


def anf_forward(codec: AnfCodec, x) -> tuple[np.ndarray, np.ndarray]:
    return codec.forward(x)


def anf_inverse(codec: AnfCodec, z, r) -> np.ndarray:
    return codec.inverse(z, r)


# --------------------------------------------------------------------------


def load_codec(source):
    """Rebuild an AnfCodec or CondCodec from a checkpoint path or bytes."""
    data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    tensors, sections = parameters_from_bytes(bytes(data))
    if "META" not in sections:
        raise CheckpointError("codec checkpoint lacks a META section")
    cfg = json.loads(sections["META"].decode())
    if cfg["kind"] == "anf":
        codec = AnfCodec(cfg["q"], cfg["d"], cfg["latent_dim"], cfg["seed"], cfg["name"])
    elif cfg["kind"] == "cond":
        from .codec_cond import CondCodec

        codec = CondCodec(cfg["q"], cfg["d"], cfg["latent_dim"], cfg["seed"], cfg["name"])
    else:
        raise CheckpointError(f"unknown codec kind {cfg['kind']!r}")
    load_into(codec.params, tensors)
    codec.meta = cfg.get("meta", {})
    if cfg["kind"] == "anf" and sections.get("ENTM") != codec.entropy.serialize():
        raise CheckpointError("entropy-model section disagrees with stored parameters")
    return codec
