"""Point-cloud encoder, conditional-batchnorm decoders and classifier.

Layout follows the occupancy-network design: a PointNet encoder whose
fully connected layers are residual blocks, and decoders conditioned on
the encoding only through the scale/shift of their batchnorms.

Batched tensors carry a leading shape axis: clouds (S, P, 3), encodings
(S, d), query points (S, N, 3). Unbatched inputs are accepted and the
leading axis is dropped again on output.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor
from .geometry.io import FormatError

TASKS = ("rec", "cls", "seg")
TOPOLOGIES = ("parallel", "joint")


@dataclass
class ModelConfig:
    n_classes: int = 3
    n_parts: int = 3
    latent_dim: int = 128
    enc_hidden: int = 128
    enc_blocks: int = 2
    dec_hidden: int = 256
    dec_blocks: int = 5
    cls_hidden: int = 128
    n_input_points: int = 300
    tasks: tuple[str, ...] = ("rec",)
    topology: str = "parallel"

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        bad = set(self.tasks) - set(TASKS)
        if bad or not self.tasks:
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.topology == "joint" and not {"rec", "seg"} <= set(self.tasks):
            raise ValueError("joint topology requires both rec and seg tasks")
        for f in ("n_classes", "n_parts", "latent_dim", "enc_hidden", "enc_blocks",
                  "dec_hidden", "dec_blocks", "cls_hidden", "n_input_points"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


class Module:
    """Named parameters and batchnorm buffers under a common prefix."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, BatchNormState] = {}

    def dense(self, name: str, rng, n_in: int, n_out: int, bias: bool = True, gain: float = 1.0,
              bias_value: float = 0.0):
        w = Tensor(_glorot(rng, n_in, n_out, gain), requires_grad=True, name=f"{self.prefix}{name}.weight")
        self.params[w.name] = w
        if bias:
            b = Tensor(np.full(n_out, bias_value, np.float32), requires_grad=True,
                       name=f"{self.prefix}{name}.bias")
            self.params[b.name] = b

    def linear(self, name: str, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.params[f"{self.prefix}{name}.weight"])
        b = self.params.get(f"{self.prefix}{name}.bias")
        return ad.add_bias(out, b) if b is not None else out

    def bn_state(self, name: str, features: int) -> None:
        self.buffers[f"{self.prefix}{name}"] = BatchNormState.fresh(features)


class PointNetEncoder(Module):
    """PointNet with residual FC blocks; max-pooled, hence permutation invariant."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "encoder."):
        super().__init__(prefix)
        h, self.n_blocks, self.n_points = cfg.enc_hidden, cfg.enc_blocks, cfg.n_input_points
        self.dense("fc_pos", rng, 3, 2 * h)
        for i in range(self.n_blocks):
            _resnet_block(self, f"block{i}", rng, 2 * h, h)
        self.dense("fc_c", rng, h, cfg.latent_dim)

    def __call__(self, cloud) -> Tensor:
        cloud = _as_input(cloud)
        single = cloud.data.ndim == 2
        if single:
            cloud = ad.reshape(cloud, (1,) + cloud.shape)
        if cloud.data.ndim != 3 or cloud.shape[1:] != (self.n_points, 3):
            raise ShapeError(f"encode: expected ({self.n_points}, 3) points per cloud, got {cloud.shape}")
        p = cloud.shape[1]
        net = self.linear("fc_pos", cloud)
        net = _resnet_forward(self, "block0", net)
        for i in range(1, self.n_blocks):
            pooled = ad.repeat(ad.max_pool(net, 1), 1, p)
            net = _resnet_forward(self, f"block{i}", ad.concat([net, pooled], -1))
        net = ad.max_pool(net, 1)
        z = self.linear("fc_c", ad.relu(net))
        return ad.reshape(z, z.shape[1:]) if single else z


def _resnet_block(mod: Module, name: str, rng, n_in: int, n_out: int) -> None:
    n_h = min(n_in, n_out)
    mod.dense(f"{name}.fc_0", rng, n_in, n_h)
    mod.dense(f"{name}.fc_1", rng, n_h, n_out)
    if n_in != n_out:
        mod.dense(f"{name}.shortcut", rng, n_in, n_out, bias=False)


def _resnet_forward(mod: Module, name: str, x: Tensor) -> Tensor:
    net = mod.linear(f"{name}.fc_0", ad.relu(x))
    dx = mod.linear(f"{name}.fc_1", ad.relu(net))
    xs = mod.linear(f"{name}.shortcut", x) if f"{mod.prefix}{name}.shortcut.weight" in mod.params else x
    return ad.add(xs, dx)


class CBNDecoder(Module):
    """Occupancy-style decoder; ``out_dim`` 1, K or 1+K selects its role."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, out_dim: int, prefix: str):
        super().__init__(prefix)
        h, d = cfg.dec_hidden, cfg.latent_dim
        self.latent_dim, self.out_dim, self.n_blocks = d, out_dim, cfg.dec_blocks
        self.dense("fc_p", rng, 3, h)
        for i in range(self.n_blocks):
            for j in range(2):
                self._cbn(f"block{i}.bn_{j}", rng, d, h)
                self.dense(f"block{i}.fc_{j}", rng, h, h)
        self._cbn("bn_out", rng, d, h)
        self.dense("fc_out", rng, h, out_dim)

    def _cbn(self, name: str, rng, d: int, h: int) -> None:
        # gamma(z) starts near 1 and beta(z) near 0
        self.dense(f"{name}.gamma", rng, d, h, gain=0.1, bias_value=1.0)
        self.dense(f"{name}.beta", rng, d, h, gain=0.1)
        self.bn_state(name, h)

    def cbn(self, name: str, x: Tensor, z: Tensor, mode: str) -> Tensor:
        xhat = ad.batchnorm(x, self.buffers[f"{self.prefix}{name}"], mode)
        return ad.cond_affine(xhat, self.linear(f"{name}.gamma", z), self.linear(f"{name}.beta", z))

    def __call__(self, z, points, mode: str = "eval") -> Tensor:
        z, points = _as_input(z), _as_input(points)
        single = points.data.ndim == 2
        if single:
            points = ad.reshape(points, (1,) + points.shape)
            z = ad.reshape(z, (1,) + z.shape)
        if z.data.ndim != 2 or z.shape[1] != self.latent_dim or z.shape[0] != points.shape[0]:
            raise ShapeError(f"decode: encoding shape {z.shape} does not match latent dim "
                             f"{self.latent_dim} for points {points.shape}")
        if points.shape[-1] != 3:
            raise ShapeError(f"decode: points must be (..., 3), got {points.shape}")
        net = self.linear("fc_p", points)
        for i in range(self.n_blocks):
            h = self.linear(f"block{i}.fc_0", ad.relu(self.cbn(f"block{i}.bn_0", net, z, mode)))
            dx = self.linear(f"block{i}.fc_1", ad.relu(self.cbn(f"block{i}.bn_1", h, z, mode)))
            net = ad.add(net, dx)
        out = self.linear("fc_out", ad.relu(self.cbn("bn_out", net, z, mode)))
        return ad.reshape(out, out.shape[1:]) if single else out


class Classifier(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "classifier."):
        super().__init__(prefix)
        self.dense("fc_0", rng, cfg.latent_dim, cfg.cls_hidden)
        self.dense("fc_1", rng, cfg.cls_hidden, cfg.n_classes)

    def __call__(self, z) -> Tensor:
        return self.linear("fc_1", ad.relu(self.linear("fc_0", _as_input(z))))


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


# -- functional API -----------------------------------------------------------


def encode(encoder: PointNetEncoder, cloud) -> Tensor:
    return encoder(cloud)


def decode_occupancy(decoder: CBNDecoder, z, points, mode: str = "eval") -> Tensor:
    """One logit per point: (N,) or (S, N)."""
    if decoder.out_dim != 1:
        raise ShapeError(f"occupancy decoder needs 1 output channel, has {decoder.out_dim}")
    out = decoder(z, points, mode)
    return ad.reshape(out, out.shape[:-1])


def decode_segmentation(decoder: CBNDecoder, z, points, mode: str = "eval") -> Tensor:
    return decoder(z, points, mode)


def decode_joint(decoder: CBNDecoder, z, points, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Single pass; channel 0 is the occupancy logit, channels 1.. the part logits."""
    if decoder.out_dim < 2:
        raise ShapeError(f"joint decoder needs 1+K output channels, has {decoder.out_dim}")
    out = decoder(z, points, mode)
    occ = ad.slice_axis(out, -1, 0, 1)
    seg = ad.slice_axis(out, -1, 1, decoder.out_dim)
    return ad.reshape(occ, occ.shape[:-1]), seg


def classify(classifier: Classifier, z) -> Tensor:
    return classifier(z)


# -- the multi-task bundle ------------------------------------------------------


@dataclass
class MultiTaskModel:
    config: ModelConfig
    encoder: PointNetEncoder
    occ_decoder: CBNDecoder | None = None
    seg_decoder: CBNDecoder | None = None
    joint_decoder: CBNDecoder | None = None
    classifier: Classifier | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "MultiTaskModel":
        rng = np.random.default_rng(seed)
        tasks = set(config.tasks)
        m = cls(config, PointNetEncoder(config, rng))
        if config.topology == "joint":
            m.joint_decoder = CBNDecoder(config, rng, 1 + config.n_parts, "joint_decoder.")
        else:
            if "rec" in tasks:
                m.occ_decoder = CBNDecoder(config, rng, 1, "occ_decoder.")
            if "seg" in tasks:
                m.seg_decoder = CBNDecoder(config, rng, config.n_parts, "seg_decoder.")
        if "cls" in tasks:
            m.classifier = Classifier(config, rng)
        return m

    def modules(self) -> list[Module]:
        return [
            x for x in (self.encoder, self.occ_decoder, self.seg_decoder, self.joint_decoder,
                        self.classifier) if x is not None
        ]

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod in self.modules():
            out.update(mod.params)
        return out

    @property
    def buffers(self) -> dict[str, BatchNormState]:
        out: dict[str, BatchNormState] = {}
        for mod in self.modules():
            out.update(mod.buffers)
        return out

    @property
    def has_occupancy(self) -> bool:
        return self.occ_decoder is not None or self.joint_decoder is not None

    @property
    def has_segmentation(self) -> bool:
        return self.seg_decoder is not None or self.joint_decoder is not None

    def encode(self, cloud) -> Tensor:
        return self.encoder(cloud)

    def decode(self, z, points, mode: str = "eval", need_occ: bool = True, need_seg: bool = True):
        """(occupancy logits | None, part logits | None) under either topology."""
        if self.joint_decoder is not None:
            return decode_joint(self.joint_decoder, z, points, mode)
        occ = seg = None
        if need_occ and self.occ_decoder is not None:
            occ = decode_occupancy(self.occ_decoder, z, points, mode)
        if need_seg and self.seg_decoder is not None:
            seg = decode_segmentation(self.seg_decoder, z, points, mode)
        return occ, seg

    def classify(self, z) -> Tensor:
        if self.classifier is None:
            raise ValueError("model has no classifier")
        return self.classifier(z)

    def astype(self, dtype) -> "MultiTaskModel":
        """Copy with every parameter and buffer cast to ``dtype``."""
        clone = MultiTaskModel.create(self.config, 0)
        clone.meta = dict(self.meta)
        src_p, src_b = self.params, self.buffers
        for name, t in clone.params.items():
            t.data = src_p[name].data.astype(dtype)
        for name, st in clone.buffers.items():
            st.running_mean = src_b[name].running_mean.astype(dtype)
            st.running_var = src_b[name].running_var.astype(dtype)
        return clone


# -- checkpoints ---------------------------------------------------------------

_LEN = struct.Struct("<Q")


def checkpoint_bytes(model: MultiTaskModel) -> bytes:
    """8-byte header length, JSON header, then the little-endian float32 blob."""
    entries, chunks, offset = [], [], 0
    arrays = [(n, t.data) for n, t in sorted(model.params.items())]
    for name, st in sorted(model.buffers.items()):
        arrays.append((f"{name}.running_mean", st.running_mean))
        arrays.append((f"{name}.running_var", st.running_var))
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "meta": model.meta, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def _parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _LEN.size:
        raise FormatError("truncated checkpoint")
    (hlen,) = _LEN.unpack_from(buf, 0)
    if _LEN.size + hlen > len(buf):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[_LEN.size : _LEN.size + hlen])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed checkpoint header: {e}") from None
    blob = memoryview(buf)[_LEN.size + hlen :]
    arrays = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["byte_offset"] + 4 * n > len(blob):
            raise FormatError(f"truncated checkpoint: tensor {e['name']!r} runs past the end")
        arr = np.frombuffer(blob, "<f4", n, e["byte_offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, arrays


def model_from_bytes(buf: bytes) -> MultiTaskModel:
    header, arrays = _parse_checkpoint(buf)
    model = MultiTaskModel.create(ModelConfig.from_dict(header["config"]), 0)
    model.meta = header.get("meta", {})
    load_arrays(model, arrays, strict=True)
    return model


def load_arrays(model: MultiTaskModel, arrays: dict[str, np.ndarray], strict: bool = True,
                prefix: str = "") -> list[str]:
    """Copy matching arrays into ``model``; returns the names loaded."""
    loaded = []
    targets: dict[str, np.ndarray] = {n: t.data for n, t in model.params.items()}
    for name, st in model.buffers.items():
        targets[f"{name}.running_mean"] = st.running_mean
        targets[f"{name}.running_var"] = st.running_var
    for name, dst in targets.items():
        if not name.startswith(prefix):
            continue
        if name not in arrays:
            if strict:
                raise ValueError(f"checkpoint lacks tensor {name!r}")
            continue
        src = arrays[name]
        if src.shape != dst.shape:
            raise ShapeError(f"checkpoint tensor {name!r}: shape mismatch {src.shape} vs {dst.shape}")
        dst[...] = src
        loaded.append(name)
    if strict:
        extra = set(arrays) - set(targets)
        if extra:
            raise ValueError(f"checkpoint has unexpected tensors: {sorted(extra)[:5]}")
    return loaded


def model_arrays(model: MultiTaskModel) -> dict[str, np.ndarray]:
    out = {n: t.data.copy() for n, t in model.params.items()}
    for name, st in model.buffers.items():
        out[f"{name}.running_mean"] = st.running_mean.copy()
        out[f"{name}.running_var"] = st.running_var.copy()
    return out


def save_checkpoint(model: MultiTaskModel, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path) -> MultiTaskModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def read_checkpoint_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return _parse_checkpoint(f.read())
