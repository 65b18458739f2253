"""MLP specs, flat parameter vectors, forward passes, and Jacobians.

Parameters live in one flat float64 vector with a named slice table; the
forward pass views each slice as a leaf tensor, so gradients come back
per-slice and are reassembled into a flat vector in slice order. Networks
may be conditioned on a scalar time/noise level, in which case every
hidden pre-activation is modulated unit-wise by an affine (scale, shift)
pair produced by a small SiLU head from a fixed Fourier embedding.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpm.errors import ConfigurationError, GraphError, NumericError
from gpm.nn import tensor as T
from gpm.nn.tensor import Tensor

ACTIVATIONS = ("leaky-relu", "relu", "tanh", "silu")
INITS = ("normal", "orthogonal", "uniform-kaiming")


@dataclass(frozen=True)
class TimeModulation:
    """Fourier embedding feeding per-layer affine modulation heads."""

    embed_size: int = 128
    freq_scale: float = 16.0

    def __post_init__(self):
        if self.embed_size % 2 != 0:
            raise ConfigurationError("embedding size must be even")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "leaky-relu"
    activation_slope: float = -0.2
    final_activation: str | None = None
    init: str = "normal"
    init_gain: float = 0.02
    time_modulation: TimeModulation | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.final_activation is not None and self.final_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown final activation {self.final_activation!r}")
        if self.init not in INITS:
            raise ConfigurationError(f"unknown init {self.init!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        return tuple(zip(dims[:-1], dims[1:]))

    def slice_table(self):
        """Ordered (name, shape) pairs defining the flat parameter layout."""
        entries = []
        for i, (d_in, d_out) in enumerate(self.layer_dims):
            entries.append((f"w{i}", (d_in, d_out)))
            entries.append((f"b{i}", (d_out,)))
        if self.time_modulation is not None:
            e = self.time_modulation.embed_size
            for i, w in enumerate(self.hidden_widths):
                entries.append((f"mod{i}_w1", (e, 2 * e)))
                entries.append((f"mod{i}_b1", (2 * e,)))
                entries.append((f"mod{i}_w2", (2 * e, 2 * w)))
                entries.append((f"mod{i}_b2", (2 * w,)))
        return entries

    def param_count(self):
        return sum(int(np.prod(shape)) for _, shape in self.slice_table())


@dataclass
class NetworkParams:
    """Flat f64 parameter vector plus its named slice table.

    ``freqs`` holds the fixed (non-trainable) Fourier frequencies used for
    time/noise conditioning; None for unconditioned networks.
    """

    values: np.ndarray
    slices: tuple[tuple[str, int, tuple[int, ...]], ...]
    freqs: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        end = self.slices[-1][1] + int(np.prod(self.slices[-1][2])) if self.slices else 0
        if self.values.shape != (end,):
            raise ConfigurationError(
                f"parameter vector has length {self.values.size}, slice table implies {end}")

    def view(self, name):
        for nm, off, shape in self.slices:
            if nm == name:
                return self.values[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self):
        return NetworkParams(self.values.copy(), self.slices,
                             None if self.freqs is None else self.freqs.copy())


def _slice_offsets(spec: MLPSpec):
    offset = 0
    out = []
    for name, shape in spec.slice_table():
        out.append((name, offset, tuple(shape)))
        offset += int(np.prod(shape))
    return tuple(out), offset


def init_params(spec: MLPSpec, seed: int) -> NetworkParams:
    """Seeded parameter init following the spec's init scheme."""
    rng = np.random.default_rng(seed)
    freqs = None
    if spec.time_modulation is not None:
        tm = spec.time_modulation
        freqs = rng.normal(0.0, tm.freq_scale, tm.embed_size // 2)
    slices, total = _slice_offsets(spec)
    values = np.zeros(total)
    for name, off, shape in slices:
        block = values[off:off + int(np.prod(shape))].reshape(shape)
        if name.startswith("b") or name.endswith("b1") or name.endswith("b2"):
            if spec.init == "uniform-kaiming":
                # matches the common linear-layer default: U(+-1/sqrt(fan_in))
                fan_in = _bias_fan_in(spec, name)
                bound = 1.0 / np.sqrt(fan_in)
                block[...] = rng.uniform(-bound, bound, shape)
            # normal / orthogonal leave biases at zero
        else:
            fan_in = shape[0]
            if spec.init == "normal":
                block[...] = rng.normal(0.0, spec.init_gain, shape)
            elif spec.init == "orthogonal":
                block[...] = _orthogonal(rng, shape) * spec.init_gain
            else:
                bound = 1.0 / np.sqrt(fan_in)
                block[...] = rng.uniform(-bound, bound, shape)
    return NetworkParams(values, slices, freqs)


def _bias_fan_in(spec: MLPSpec, name: str):
    table = dict((nm, shape) for nm, shape in spec.slice_table())
    w_name = "w" + name[1:] if name.startswith("b") else name.replace("_b", "_w")
    return table[w_name][0]


def _orthogonal(rng, shape):
    rows, cols = shape
    a = rng.normal(0.0, 1.0, (max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols] if rows >= cols else q.T[:rows, :cols]


def param_leaves(params: NetworkParams, trainable=True) -> dict[str, Tensor]:
    """Per-slice tensors viewing the flat vector; leaves if trainable."""
    out = {}
    for name, off, shape in params.slices:
        view = params.values[off:off + int(np.prod(shape))].reshape(shape)
        out[name] = Tensor(view, requires_grad=trainable)
    return out


def flatten_grads(params: NetworkParams, grads: dict[str, Tensor]) -> np.ndarray:
    """Assemble per-slice gradients into one flat vector in slice order."""
    flat = np.zeros_like(params.values)
    for name, off, shape in params.slices:
        g = grads.get(name)
        if g is not None:
            flat[off:off + int(np.prod(shape))] = np.reshape(g.data, -1)
    return flat


def fourier_features(freqs: np.ndarray, t) -> np.ndarray:
    """[cos(2 pi f t) | sin(2 pi f t)] rows for scalar or (B,) t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    phase = 2.0 * np.pi * np.outer(t, freqs)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def time_embedding(t: float, size: int, frequency_scale: float, seed: int) -> np.ndarray:
    """Seeded random-Fourier-feature embedding of a scalar time."""
    if size % 2 != 0:
        raise ConfigurationError("embedding size must be even")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, frequency_scale, size // 2)
    return fourier_features(freqs, t)[0]


def _activation(name, slope):
    if name == "leaky-relu":
        return lambda h: T.leaky_relu(h, slope)
    if name == "relu":
        return T.relu
    if name == "tanh":
        return T.tanh
    return T.silu


def mlp_apply(spec: MLPSpec, leaves: dict[str, Tensor], x, t=None,
              freqs: np.ndarray | None = None):
    """Forward pass over prebuilt parameter leaves; returns a Tensor.

    ``x`` is (batch, input_dim); ``t`` (scalar or (batch,)) is required
    exactly when the spec carries time modulation.
    """
    if (t is not None) != (spec.time_modulation is not None):
        raise ConfigurationError("time input must be supplied iff the spec is time-modulated")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.data.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"input shape {h.data.shape} does not match input_dim={spec.input_dim}")
    emb = None
    if spec.time_modulation is not None:
        if freqs is None:
            raise ConfigurationError("time-modulated forward needs the embedding frequencies")
        emb = Tensor(fourier_features(freqs, t))
    act = _activation(spec.activation, spec.activation_slope)
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = T.add(T.matmul(h, leaves[f"w{i}"]), leaves[f"b{i}"])
        if i < n_layers - 1:
            if emb is not None:
                width = spec.hidden_widths[i]
                hidden = T.silu(T.add(T.matmul(emb, leaves[f"mod{i}_w1"]),
                                      leaves[f"mod{i}_b1"]))
                raw = T.add(T.matmul(hidden, leaves[f"mod{i}_w2"]), leaves[f"mod{i}_b2"])
                scale = T.add(raw[:, :width], 1.0)
                shift = raw[:, width:]
                h = T.add(T.mul(scale, h), shift)
            h = act(h)
    if spec.final_activation is not None:
        h = _activation(spec.final_activation, spec.activation_slope)(h)
    return h


def mlp_forward(spec: MLPSpec, params: NetworkParams, x, t=None) -> np.ndarray:
    """Pure forward evaluation; validates finiteness, returns an array."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    with T.no_grad():
        out = mlp_apply(spec, param_leaves(params, trainable=False), x, t,
                        freqs=params.freqs)
    return out.data


def grad(loss_fn, params: NetworkParams) -> np.ndarray:
    """Flat reverse-mode gradient of ``loss_fn(leaves)`` at ``params``."""
    leaves = param_leaves(params)
    out = loss_fn(leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GraphError(f"loss must produce a scalar Tensor, got {type(out).__name__}")
    names = list(leaves)
    gs = T.backward(out, [leaves[n] for n in names])
    return flatten_grads(params, dict(zip(names, gs)))


def jacobian_params(spec: MLPSpec, params: NetworkParams, z) -> np.ndarray:
    """(output_dim, param_count) Jacobian of the network output at ``z``."""
    if spec.time_modulation is not None:
        raise ConfigurationError("parameter Jacobians are for unmodulated networks")
    z = np.asarray(z, dtype=np.float64).reshape(1, spec.input_dim)
    leaves = param_leaves(params)
    out = mlp_apply(spec, leaves, z)
    names = list(leaves)
    rows = np.empty((spec.output_dim, params.values.size))
    for i in range(spec.output_dim):
        seed = np.zeros_like(out.data)
        seed[0, i] = 1.0
        gs = T.backward(out, [leaves[n] for n in names], grad_out=Tensor(seed))
        rows[i] = flatten_grads(params, dict(zip(names, gs)))
    return rows


# -- serialization -------------------------------------------------------

def save_params(path, spec: MLPSpec, params: NetworkParams):
    """Little-endian f64 blob + JSON sidecar (spec and slice table)."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(params.values.astype("<f8").tobytes())
    meta = {
        "spec": spec_to_dict(spec),
        "slices": [[n, o, list(s)] for n, o, s in params.slices],
        "freqs": None if params.freqs is None else params.freqs.tolist(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_params(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = spec_from_dict(meta["spec"])
    values = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    slices = tuple((n, o, tuple(s)) for n, o, s in meta["slices"])
    freqs = None if meta["freqs"] is None else np.asarray(meta["freqs"])
    return spec, NetworkParams(values, slices, freqs)


def spec_to_dict(spec: MLPSpec):
    d = {
        "input_dim": spec.input_dim,
        "hidden_widths": list(spec.hidden_widths),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
        "activation_slope": spec.activation_slope,
        "final_activation": spec.final_activation,
        "init": spec.init,
        "init_gain": spec.init_gain,
    }
    if spec.time_modulation is not None:
        d["time_modulation"] = {
            "embed_size": spec.time_modulation.embed_size,
            "freq_scale": spec.time_modulation.freq_scale,
        }
    return d


def spec_from_dict(d):
    tm = d.get("time_modulation")
    return MLPSpec(
        input_dim=d["input_dim"],
        hidden_widths=tuple(d["hidden_widths"]),
        output_dim=d["output_dim"],
        activation=d["activation"],
        activation_slope=d["activation_slope"],
        final_activation=d.get("final_activation"),
        init=d["init"],
        init_gain=d["init_gain"],
        time_modulation=None if tm is None else TimeModulation(**tm),
    )
