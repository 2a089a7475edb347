"""Two-branch network: shared temporal convolution, one GRU stack per task,
mean pooling over time into the embedding, and a linear head per task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ShapeError

GRU_WEIGHTS = ("W_ir", "W_iz", "W_in", "W_hr", "W_hz", "W_hn")
GRU_BIASES = ("b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn")
CHECKPOINT_MAGIC = b"OSPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_keywords: int
    n_speakers: int
    n_features: int = 40
    tconv_channels: int = 64
    tconv_width: int = 5
    gru_hidden: int = 256
    gru_layers: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, int) and value <= 0:
                raise ValueError(f"model size {f.name} must be positive, got {value}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def embedding_dim(self) -> int:
        return self.gru_hidden


@dataclass
class GruParams:
    """One GRU layer. Weights are (hidden, input) or (hidden, hidden)."""

    W_ir: Tensor
    W_iz: Tensor
    W_in: Tensor
    W_hr: Tensor
    W_hz: Tensor
    W_hn: Tensor
    b_ir: Tensor
    b_iz: Tensor
    b_in: Tensor
    b_hr: Tensor
    b_hz: Tensor
    b_hn: Tensor

    @property
    def hidden_size(self) -> int:
        return self.W_hr.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_ir.shape[1]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in GRU_WEIGHTS + GRU_BIASES]

    def weights(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in GRU_WEIGHTS}


@dataclass
class ModelParams:
    tconv_kernel: Tensor  # (channels, n_features, width)
    tconv_bias: Tensor
    gru_kws: list[GruParams]
    gru_sv: list[GruParams]
    head_kws_weight: Tensor  # (n_keywords, hidden)
    head_kws_bias: Tensor
    head_sv_weight: Tensor  # (n_speakers, hidden)
    head_sv_bias: Tensor
    # fixed input standardisation, estimated on training features; not trained
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"tconv.kernel": self.tconv_kernel, "tconv.bias": self.tconv_bias}
        for branch in ("kws", "sv"):
            for i, layer in enumerate(getattr(self, f"gru_{branch}")):
                for n in GRU_WEIGHTS + GRU_BIASES:
                    out[f"gru_{branch}.{i}.{n}"] = getattr(layer, n)
        out["head_kws.weight"] = self.head_kws_weight
        out["head_kws.bias"] = self.head_kws_bias
        out["head_sv.weight"] = self.head_sv_weight
        out["head_sv.bias"] = self.head_sv_bias
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def buffers(self) -> dict[str, np.ndarray]:
        if self.input_mean is None:
            return {}
        return {"input.mean": self.input_mean, "input.std": self.input_std}

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        std = np.asarray(std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("input std must be positive")
        self.input_mean = np.asarray(mean, dtype=np.float64)
        self.input_std = std

    def copy(self) -> "ModelParams":
        arrays = {k: t.value.copy() for k, t in self.named_tensors().items()}
        arrays.update({k: v.copy() for k, v in self.buffers().items()})
        return from_named_arrays(arrays)


@dataclass
class BranchOutput:
    embedding: Tensor  # pooled hidden state, (B, hidden) or (hidden,)
    logits: Tensor


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _init_gru(rng, n_in: int, hidden: int, dtype) -> GruParams:
    weights = {}
    for n in GRU_WEIGHTS:
        fan_in = n_in if n.startswith("W_i") else hidden
        weights[n] = _glorot(rng, (hidden, fan_in), fan_in, hidden, dtype)
    biases = {n: _zeros((hidden,), dtype) for n in GRU_BIASES}
    return GruParams(**weights, **biases)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases. Same seed, same parameters."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    c, f, w = config.tconv_channels, config.n_features, config.tconv_width
    kernel = _glorot(rng, (c, f, w), f * w, c * w, dt)
    stacks = {}
    for branch in ("kws", "sv"):
        layers = []
        n_in = c
        for _ in range(config.gru_layers):
            layers.append(_init_gru(rng, n_in, config.gru_hidden, dt))
            n_in = config.gru_hidden
        stacks[branch] = layers
    h = config.gru_hidden
    return ModelParams(
        tconv_kernel=kernel,
        tconv_bias=_zeros((c,), dt),
        gru_kws=stacks["kws"],
        gru_sv=stacks["sv"],
        head_kws_weight=_glorot(rng, (config.n_keywords, h), h, config.n_keywords, dt),
        head_kws_bias=_zeros((config.n_keywords,), dt),
        head_sv_weight=_glorot(rng, (config.n_speakers, h), h, config.n_speakers, dt),
        head_sv_bias=_zeros((config.n_speakers,), dt),
    )


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """A single GRU update built from engine primitives (batched or not)."""
    if x_t.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(f"gru_step: x {x_t.shape} / h {h_prev.shape} do not fit "
                         f"input {p.input_size}, hidden {p.hidden_size}")
    r = ad.sigmoid(ad.linear(x_t, p.W_ir, p.b_ir) + ad.linear(h_prev, p.W_hr, p.b_hr))
    z = ad.sigmoid(ad.linear(x_t, p.W_iz, p.b_iz) + ad.linear(h_prev, p.W_hz, p.b_hz))
    n = ad.tanh(ad.linear(x_t, p.W_in, p.b_in) + ad.hadamard(r, ad.linear(h_prev, p.W_hn, p.b_hn)))
    return ad.hadamard(1.0 - z, n) + ad.hadamard(z, h_prev)


def gru_layer(p: GruParams, x: Tensor) -> Tensor:
    """Run one GRU layer over a (B, T, I) or (T, I) sequence from a zero state.

    Returns every hidden state, (B, T, H). Forward and backpropagation
    through time are fused into one tape node.
    """
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 3 or xv.shape[2] != p.input_size:
        raise ShapeError(f"gru_layer: input {x.shape} does not fit input size {p.input_size}")
    n_batch, n_time, _ = xv.shape
    hidden = p.hidden_size
    w_in = np.concatenate([p.W_ir.value, p.W_iz.value, p.W_in.value])
    w_hid = np.concatenate([p.W_hr.value, p.W_hz.value, p.W_hn.value])
    b_in = np.concatenate([p.b_ir.value, p.b_iz.value, p.b_in.value])
    b_hid = np.concatenate([p.b_hr.value, p.b_hz.value, p.b_hn.value])

    gi = xv @ w_in.T + b_in
    dtype = gi.dtype
    hs = np.empty((n_batch, n_time + 1, hidden), dtype=dtype)
    hs[:, 0] = 0.0
    r = np.empty((n_batch, n_time, hidden), dtype=dtype)
    z = np.empty_like(r)
    n = np.empty_like(r)
    hn = np.empty_like(r)
    for t in range(n_time):
        h = hs[:, t]
        gh = h @ w_hid.T + b_hid
        r_t = expit(gi[:, t, :hidden] + gh[:, :hidden])
        z_t = expit(gi[:, t, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
        hn_t = gh[:, 2 * hidden:]
        n_t = np.tanh(gi[:, t, 2 * hidden:] + r_t * hn_t)
        hs[:, t + 1] = (1.0 - z_t) * n_t + z_t * h
        r[:, t], z[:, t], n[:, t], hn[:, t] = r_t, z_t, n_t, hn_t
    out = hs[:, 1:]

    def backward(g):
        g = g[None] if squeeze else g
        da_in = np.empty((n_batch, n_time, 3 * hidden), dtype=dtype)
        da_hid = np.empty_like(da_in)
        dh_next = np.zeros((n_batch, hidden), dtype=dtype)
        for t in range(n_time - 1, -1, -1):
            dh = g[:, t] + dh_next
            r_t, z_t, n_t = r[:, t], z[:, t], n[:, t]
            da_n = dh * (1.0 - z_t) * (1.0 - n_t * n_t)
            da_r = da_n * hn[:, t] * r_t * (1.0 - r_t)
            da_z = dh * (hs[:, t] - n_t) * z_t * (1.0 - z_t)
            da_in[:, t, :hidden] = da_r
            da_in[:, t, hidden:2 * hidden] = da_z
            da_in[:, t, 2 * hidden:] = da_n
            da_hid[:, t, :2 * hidden] = da_in[:, t, :2 * hidden]
            da_hid[:, t, 2 * hidden:] = da_n * r_t
            dh_next = dh * z_t + da_hid[:, t] @ w_hid
        flat_in = da_in.reshape(-1, 3 * hidden)
        flat_hid = da_hid.reshape(-1, 3 * hidden)
        gw_in = flat_in.T @ xv.reshape(-1, xv.shape[2])
        gw_hid = flat_hid.T @ hs[:, :-1].reshape(-1, hidden)
        gb_in = flat_in.sum(axis=0)
        gb_hid = flat_hid.sum(axis=0)
        gx = da_in @ w_in
        if squeeze:
            gx = gx[0]
        split = lambda a: (a[:hidden], a[hidden:2 * hidden], a[2 * hidden:])  # noqa: E731
        return (gx, *split(gw_in), *split(gw_hid), *split(gb_in), *split(gb_hid))

    parents = (x, p.W_ir, p.W_iz, p.W_in, p.W_hr, p.W_hz, p.W_hn,
               p.b_ir, p.b_iz, p.b_in, p.b_hr, p.b_hz, p.b_hn)
    return ad.record(out[0] if squeeze else out, parents, backward)


def gru_stack(layers: list[GruParams], x: Tensor) -> Tensor:
    for layer in layers:
        x = gru_layer(layer, x)
    return x


def _as_input(features, dtype) -> Tensor:
    if isinstance(features, Tensor):
        return features
    frames = getattr(features, "frames", features)
    return Tensor(np.asarray(frames, dtype=dtype))


def forward(params: ModelParams, features) -> tuple[BranchOutput, BranchOutput]:
    """Run both branches on (T, D) or (B, T, D) features; returns (kws, sv)."""
    x = _as_input(features, params.tconv_kernel.value.dtype)
    if x.ndim not in (2, 3):
        raise ShapeError(f"forward: expected (T, D) or (B, T, D) features, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("forward: feature matrix has no frames")
    if x.shape[-1] != params.tconv_kernel.shape[1]:
        raise ShapeError(f"forward: features have {x.shape[-1]} coefficients, "
                         f"model expects {params.tconv_kernel.shape[1]}")
    if params.input_mean is not None:
        dt = params.tconv_kernel.value.dtype
        x = ad.hadamard(ad.sub(x, Tensor(params.input_mean.astype(dt))), Tensor((1.0 / params.input_std).astype(dt)))
    shared = ad.relu(ad.conv1d(x, params.tconv_kernel, params.tconv_bias))
    kws = _branch(params.gru_kws, params.head_kws_weight, params.head_kws_bias, shared)
    sv = _branch(params.gru_sv, params.head_sv_weight, params.head_sv_bias, shared)
    return kws, sv


def _branch(layers, head_w, head_b, shared) -> BranchOutput:
    embedding = ad.mean_over_time(gru_stack(layers, shared))
    return BranchOutput(embedding, ad.linear(embedding, head_w, head_b))


# --- checkpoints ------------------------------------------------------------

def from_named_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    t = {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}

    def stack(branch):
        layers = []
        i = 0
        while f"gru_{branch}.{i}.W_ir" in t:
            layers.append(GruParams(**{n: t[f"gru_{branch}.{i}.{n}"] for n in GRU_WEIGHTS + GRU_BIASES}))
            i += 1
        return layers

    try:
        params = ModelParams(t["tconv.kernel"], t["tconv.bias"], stack("kws"), stack("sv"),
                             t["head_kws.weight"], t["head_kws.bias"], t["head_sv.weight"], t["head_sv.bias"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc.args[0]}") from None
    if "input.mean" in arrays:
        params.set_input_stats(arrays["input.mean"], arrays["input.std"])
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    """``OSPT``, u32 version, u32 count, then per tensor: u32 name length,
    name, u32 ndim, u32 dims, float64 little-endian payload."""
    named = {k: t.value for k, t in params.named_tensors().items()}
    named.update(params.buffers())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, value in named.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n_name].decode("utf-8")
            pos += n_name
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + n_bytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(data, dtype="<f8", count=n_bytes // 8, offset=pos).reshape(shape).copy()
            pos += n_bytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(path, config: ModelConfig) -> ModelParams:
    """Read a checkpoint and check every tensor against ``config``'s shapes."""
    arrays = read_checkpoint(path)
    expected = {k: t.shape for k, t in init_params(config, 0).named_tensors().items()}
    if "input.mean" in arrays or "input.std" in arrays:
        expected["input.mean"] = expected["input.std"] = (config.n_features,)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensors do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config expects {shape}")
    dt = np.dtype(config.dtype)
    return from_named_arrays({k: v if k.startswith("input.") else v.astype(dt) for k, v in arrays.items()})
