"""Character-level convolutional Q-network with hand-written gradients.

Canonical layout (time axis x channels)::

    input 600x71
    conv 7  -> 594x20   pool 3 -> 198x20
    conv 7  -> 192x20   pool 3 -> 64x20
    conv 5  -> 60x50    pool 3 -> 20x50
    conv 5  -> 16x50    pool 2 -> 8x50  (flattened: 400)
    hidden 400 -> 400
    linear 400 -> n_actions

Convolutions are valid (no padding), stride 1; pooling is non-overlapping max
with any trailing remainder dropped.  Every layer except the output layer is
followed by a rectifier.

Inputs come either as dense one-hot matrices ``(B, L, A)`` or as compact code
arrays ``(B, L)`` holding the alphabet index per position (``A`` marks an
empty position).  The code path computes the first convolution by gathering
one weight row per character instead of a dense multiply.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

CHECKPOINT_MAGIC = b"LDRQNET\x00"
CHECKPOINT_FORMAT = 1


class VersionMismatch(RuntimeError):
    pass


class Divergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetSpec:
    seq_len: int = 600
    alphabet: int = 71
    kernels: tuple[int, ...] = (7, 7, 5, 5)
    filters: tuple[int, ...] = (20, 20, 50, 50)
    pools: tuple[int, ...] = (3, 3, 3, 2)
    hidden: int = 400
    n_actions: int = 201

    def __post_init__(self) -> None:
        if self.n_actions < 1:
            raise ValueError("action_count must be >= 1")
        if not len(self.kernels) == len(self.filters) == len(self.pools):
            raise ValueError("kernels, filters and pools must have equal length")
        if self.flat_size < 1:
            raise ValueError(f"architecture collapses the time axis: {self.time_lengths()}")

    def time_lengths(self) -> list[int]:
        """Time-axis length after each conv and each pool, in order."""
        out, n = [], self.seq_len
        for k, p in zip(self.kernels, self.pools):
            n = n - k + 1
            out.append(n)
            n = n // p if n > 0 else 0
            out.append(n)
        return out

    @property
    def flat_size(self) -> int:
        return self.time_lengths()[-1] * self.filters[-1]

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.alphabet
        for i, (k, f) in enumerate(zip(self.kernels, self.filters), start=1):
            shapes[f"conv{i}.w"] = (k, cin, f)
            shapes[f"conv{i}.b"] = (f,)
            cin = f
        shapes["hidden.w"] = (self.flat_size, self.hidden)
        shapes["hidden.b"] = (self.hidden,)
        shapes["output.w"] = (self.hidden, self.n_actions)
        shapes["output.b"] = (self.n_actions,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def table1_spec(n_actions: int = 201) -> NetSpec:
    return NetSpec(n_actions=n_actions)


@dataclass
class NetworkParams:
    spec: NetSpec
    arrays: dict[str, np.ndarray]
    version: int = 0

    @property
    def layer_names(self) -> list[str]:
        return list(self.spec.layer_shapes())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def frozen(self) -> "NetworkParams":
        """Read-only copy, safe to hand to concurrent readers."""
        snap = self.copy()
        for a in snap.arrays.values():
            a.flags.writeable = False
        return snap

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.spec, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.version
        )

    def equals(self, other: "NetworkParams") -> bool:
        return (
            self.spec == other.spec
            and self.version == other.version
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    def checksum(self) -> float:
        return float(sum(np.sum(a, dtype=np.float64) * (i + 1) for i, a in enumerate(self.arrays.values())))


def init_params(spec: NetSpec, rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases, version 0."""
    arrays = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        if len(shape) == 3:
            k, cin, cout = shape
            fan_in, fan_out = k * cin, k * cout
        else:
            fan_in, fan_out = shape
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-lim, lim, size=shape)
    return NetworkParams(spec, arrays, 0)


def init(action_count: int, rng: np.random.Generator, spec: Optional[NetSpec] = None) -> NetworkParams:
    if action_count < 1:
        raise ValueError("action_count must be >= 1")
    base = spec or NetSpec()
    return init_params(NetSpec(**{**asdict(base), "n_actions": action_count}), rng)


def param_counts(params: NetworkParams | NetSpec) -> dict[str, int]:
    """Weight counts per layer, biases excluded."""
    spec = params.spec if isinstance(params, NetworkParams) else params
    return {
        name[:-2]: int(np.prod(shape))
        for name, shape in spec.layer_shapes().items()
        if name.endswith(".w")
    }


# ----------------------------------------------------------------------------
# Forward
# ----------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """One conv -> relu -> pool stage.

    Rows ``[0, head_rows)`` of the conv output are stored explicitly; every
    later row equals ``z_tail`` (its receptive field lies wholly in padding).
    """

    n: int  # conv output length
    head_rows: int
    z_head: np.ndarray  # (B, head_rows, F)
    z_tail: np.ndarray  # (F,)
    argmax: np.ndarray  # (B, pooled_head, F)
    pooled_head: np.ndarray  # (B, pooled_head, F)
    m: int  # pooled length
    cols: Optional[np.ndarray] = None  # conv input rows feeding the head (layers > 1)
    x_tail: Optional[np.ndarray] = None  # conv input tail value (layers > 1)

    def pre_activation(self) -> np.ndarray:
        return _extend(self.z_head, self.z_tail, self.n)

    def pooled(self) -> np.ndarray:
        return _extend(self.pooled_head, np.maximum(self.z_tail, 0.0), self.m)

    def argmax_full(self) -> np.ndarray:
        b, h, f = self.argmax.shape
        out = np.zeros((b, self.m, f), dtype=self.argmax.dtype)
        out[:, :h] = self.argmax
        return out


@dataclass
class ForwardTrace:
    version: int
    sparse: bool
    conv1_input: np.ndarray  # codes (B, L) or dense (B, L, A)
    layers: list = field(default_factory=list)
    flat: Optional[np.ndarray] = None
    hidden_pre: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None

    @property
    def hidden_embedding(self) -> np.ndarray:
        return self.hidden

    def time_lengths(self) -> list[int]:
        out = []
        for lt in self.layers:
            out += [lt.n, lt.m]
        return out


def _extend(head: np.ndarray, tail: np.ndarray, length: int) -> np.ndarray:
    b, r, c = head.shape
    if r >= length:
        return head[:, :length]
    out = np.empty((b, length, c), dtype=np.result_type(head, tail))
    out[:, :r] = head
    out[:, r:] = tail
    return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, n, C) -> (B*(n-k+1), k*C), columns ordered (offset, channel)."""
    b, n, c = x.shape
    lo = n - k + 1
    cols = np.empty((b, lo, k * c), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j * c : (j + 1) * c] = x[:, j : j + lo]
    return cols.reshape(b * lo, k * c)


def _conv(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid stride-1 convolution of (B, n, C) with (k, C, F) weights."""
    k = w.shape[0]
    lo = x.shape[1] - k + 1
    z = np.matmul(x[:, 0:lo], w[0])
    for j in range(1, k):
        z += np.matmul(x[:, j : j + lo], w[j])
    z += bias
    return z


def _pool(a: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool over the time axis; ties go to the first slot."""
    m = a.shape[1] // s
    if s == 1:
        return a[:, :m].copy(), np.zeros(a[:, :m].shape, dtype=np.int8)
    slots = [a[:, j : m * s : s] for j in range(s)]
    out = slots[0].copy()
    for c in slots[1:]:
        np.maximum(out, c, out=out)
    idx = np.full(out.shape, s - 1, dtype=np.int8)
    for j in range(s - 2, -1, -1):
        idx = np.where(slots[j] == out, np.int8(j), idx)
    return out, idx


def _unpool(d: np.ndarray, idx: np.ndarray, s: int) -> np.ndarray:
    b, m, c = d.shape
    full = np.zeros((b, m * s, c), dtype=d.dtype)
    for j in range(s):
        full[:, j::s] = np.where(idx == j, d, 0.0)
    return full


def _conv1_dense(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    w, bias = params["conv1.w"], params["conv1.b"]
    k, a, f = w.shape
    b, n, _ = x.shape
    cols = _im2col(x, k)
    return (cols @ w.reshape(k * a, f)).reshape(b, n - k + 1, f) + bias


def _active_rows(codes: np.ndarray, null: int, lo: int) -> int:
    occupied = np.flatnonzero((codes != null).any(axis=0))
    if occupied.size == 0:
        return 0
    return min(int(occupied[-1]) + 1, lo)


@numba.njit(cache=True)
def _gather_conv(codes, w, bias, active, out):  # pragma: no cover - compiled
    k, a, f = w.shape
    for b in range(codes.shape[0]):
        for p in range(active):
            for q in range(f):
                out[b, p, q] = bias[q]
            for j in range(k):
                c = codes[b, p + j]
                if c < a:
                    for q in range(f):
                        out[b, p, q] += w[j, c, q]


@numba.njit(cache=True)
def _scatter_conv_grad(codes, dz, k, grad):  # pragma: no cover - compiled
    a = grad.shape[1]
    f = dz.shape[2]
    for b in range(dz.shape[0]):
        for p in range(dz.shape[1]):
            for j in range(k):
                c = codes[b, p + j]
                if c < a:
                    for q in range(f):
                        grad[j, c, q] += dz[b, p, q]


def _conv1_sparse(params: NetworkParams, codes: np.ndarray) -> tuple[np.ndarray, int]:
    """Rows of the first conv output that see at least one character."""
    w, bias = params["conv1.w"], params["conv1.b"]
    k, a, f = w.shape
    b, n = codes.shape
    active = _active_rows(codes, a, n - k + 1)
    z = np.empty((b, active, f), dtype=w.dtype)
    _gather_conv(np.ascontiguousarray(codes, dtype=np.int16), w, bias.astype(w.dtype), active, z)
    return z, active


def _forward_layers(params: NetworkParams, z_head: np.ndarray, n: int, trace: ForwardTrace) -> np.ndarray:
    spec = params.spec
    z_tail = params["conv1.b"].copy()
    for i in range(len(spec.kernels)):
        cols = x_tail = None
        if i > 0:
            k = spec.kernels[i]
            w, bias = params[f"conv{i + 1}.w"], params[f"conv{i + 1}.b"]
            b, r_in, c = x_head.shape
            n = m - k + 1
            r = min(r_in, n)
            x_tail = p_tail
            if r > 0:
                cols = _extend(x_head, x_tail, r + k - 1)
                z_head = _conv(cols, w, bias)
            else:
                cols = np.zeros((b, k - 1, c), dtype=w.dtype)
                z_head = np.zeros((b, 0, w.shape[2]), dtype=w.dtype)
            z_tail = bias + x_tail @ w.sum(axis=0)
        s = spec.pools[i]
        r = z_head.shape[1]
        m = n // s
        rp = min(m, -(-r // s))
        # max-pool commutes with the rectifier, so pool first and rectify the
        # smaller array; where a window is all <= 0 the gate zeroes its gradient.
        x_head, idx = _pool(_extend(z_head, z_tail, rp * s), s)
        np.maximum(x_head, 0.0, out=x_head)
        p_tail = np.maximum(z_tail, 0.0)
        trace.layers.append(LayerTrace(n, r, z_head, z_tail, idx, x_head, m, cols, x_tail))
    flat = _extend(x_head, p_tail, m).reshape(x_head.shape[0], -1)
    hz = flat @ params["hidden.w"] + params["hidden.b"]
    h = np.maximum(hz, 0.0)
    trace.flat, trace.hidden_pre, trace.hidden = flat, hz, h
    return h @ params["output.w"] + params["output.b"]


def forward(params: NetworkParams, encoded_dense: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Q-values from dense one-hot input of shape (L, A) or (B, L, A)."""
    spec = params.spec
    x = np.asarray(encoded_dense)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.seq_len, spec.alphabet):
        raise ValueError(f"expected input (..., {spec.seq_len}, {spec.alphabet}), got {x.shape}")
    x = x.astype(params["conv1.w"].dtype, copy=False)
    trace = ForwardTrace(params.version, False, x)
    z1 = _conv1_dense(params, x)
    q = _forward_layers(params, z1, z1.shape[1], trace)
    return (q[0] if single else q), trace


def forward_codes(params: NetworkParams, codes: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Q-values from compact code arrays of shape (L,) or (B, L)."""
    spec = params.spec
    codes = np.asarray(codes)
    single = codes.ndim == 1
    if single:
        codes = codes[None]
    if codes.ndim != 2 or codes.shape[1] != spec.seq_len:
        raise ValueError(f"expected codes (..., {spec.seq_len}), got {codes.shape}")
    z1, _ = _conv1_sparse(params, codes)
    trace = ForwardTrace(params.version, True, codes)
    q = _forward_layers(params, z1, spec.seq_len - spec.kernels[0] + 1, trace)
    return (q[0] if single else q), trace


def codes_from_pairs(pairs, spec: NetSpec) -> np.ndarray:
    codes = np.full(spec.seq_len, spec.alphabet, dtype=np.int16)
    seen = set()
    for p, c in pairs:
        if p in seen:
            raise ValueError(f"duplicate position {p} in sparse view")
        if not (0 <= p < spec.seq_len and 0 <= c < spec.alphabet):
            raise ValueError(f"sparse entry {(p, c)} out of range")
        seen.add(p)
        codes[p] = c
    return codes


def forward_sparse(params: NetworkParams, sparse_view) -> tuple[np.ndarray, ForwardTrace]:
    """Same contract as :func:`forward`, input given as (position, index) pairs."""
    return forward_codes(params, codes_from_pairs(sparse_view, params.spec))


def q_values(params: NetworkParams, codes: np.ndarray) -> np.ndarray:
    return forward_codes(params, codes)[0]


# ----------------------------------------------------------------------------
# Backward
# ----------------------------------------------------------------------------


def backward(params: NetworkParams, trace: ForwardTrace, dloss_dq: np.ndarray) -> dict[str, np.ndarray]:
    if trace.version != params.version:
        raise VersionMismatch(
            f"trace from params version {trace.version}, params are at {params.version}"
        )
    spec = params.spec
    dq = np.asarray(dloss_dq, dtype=params["output.w"].dtype)
    if dq.ndim == 1:
        dq = dq[None]
    grads: dict[str, np.ndarray] = {}
    grads["output.w"] = trace.hidden.T @ dq
    grads["output.b"] = dq.sum(axis=0)
    dhz = (dq @ params["output.w"].T) * (trace.hidden_pre > 0)
    grads["hidden.w"] = trace.flat.T @ dhz
    grads["hidden.b"] = dhz.sum(axis=0)
    d = (dhz @ params["hidden.w"].T).reshape(dq.shape[0], trace.layers[-1].m, -1)
    # Rows past the head all hold the same activations, so their gradients are
    # only ever needed summed over rows and batch: carry that sum as a vector.
    rp_top = trace.layers[-1].argmax.shape[1]
    d_tail = d[:, rp_top:].sum(axis=(0, 1))
    d = d[:, :rp_top]

    for i in reversed(range(len(spec.kernels))):
        lt = trace.layers[i]
        s = spec.pools[i]
        r = lt.head_rows
        rp = lt.argmax.shape[1]
        h = rp * s
        # constant tail windows send their gradient to slot 0 under one gate
        dz_head = _unpool(d, lt.argmax, s)
        dz_head[:, :r] *= lt.z_head[:, : min(r, h)] > 0
        tail_gate = lt.z_tail > 0
        dz_head[:, r:] *= tail_gate
        tail_sum = d_tail * tail_gate
        name = f"conv{i + 1}"
        w = params[f"{name}.w"]
        k, cin, f = w.shape
        grads[f"{name}.b"] = dz_head.sum(axis=(0, 1)) + tail_sum
        b = dz_head.shape[0]
        head_in = min(r, h)
        if i > 0:
            wr = w.reshape(k * cin, f)
            gz = dz_head[:, :head_in]
            gw = np.empty_like(w)
            for j in range(k):
                gw[j] = np.tensordot(lt.cols[:, j : j + head_in], gz, axes=([0, 1], [0, 1]))
            const = dz_head[:, head_in:].sum(axis=(0, 1)) + tail_sum
            grads[f"{name}.w"] = gw + lt.x_tail[:, None] * const[None, :]
            rp_prev = trace.layers[i - 1].argmax.shape[1]
            # rows dropped by an uneven pool carry no gradient, hence the max
            dx = np.zeros((b, max(h + k - 1, rp_prev), cin), dtype=dz_head.dtype)
            dcols = (dz_head.reshape(-1, f) @ wr.T).reshape(b, h, k, cin)
            for j in range(k):
                dx[:, j : j + h] += dcols[:, :, j]
            d_tail = dx[:, rp_prev:].sum(axis=(0, 1)) + w.sum(axis=0) @ tail_sum
            d = dx[:, :rp_prev]
        elif trace.sparse:
            grads[f"{name}.w"] = _conv1_sparse_grad(trace.conv1_input, dz_head[:, :head_in], k, cin)
        else:
            if rp < lt.m:
                raise AssertionError("dense traces carry no constant tail")
            cols = _im2col(trace.conv1_input, k)
            full = np.zeros((b, lt.n, f), dtype=dz_head.dtype)
            full[:, :h] = dz_head
            grads[f"{name}.w"] = (cols.T @ full.reshape(-1, f)).reshape(k, cin, f)
    return {name: grads[name] for name in params.arrays}


def _conv1_sparse_grad(codes: np.ndarray, dz: np.ndarray, k: int, a: int) -> np.ndarray:
    grad = np.zeros((k, a, dz.shape[2]), dtype=dz.dtype)
    _scatter_conv_grad(np.ascontiguousarray(codes, dtype=np.int16), np.ascontiguousarray(dz), k, grad)
    return grad


# ----------------------------------------------------------------------------
# Optimizer and copies
# ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    rho: float = 0.95
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: NetworkParams, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.acc = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return st


@numba.njit(cache=True)
def _rms_update(w, acc, g, lr, rho, eps):  # pragma: no cover - compiled
    for i in range(w.size):
        a = rho * acc[i] + (1.0 - rho) * g[i] * g[i]
        acc[i] = a
        w[i] -= lr * g[i] / np.sqrt(a + eps)


def rmsprop_step(params: NetworkParams, opt: OptimizerState, grads: dict[str, np.ndarray]) -> NetworkParams:
    """In-place RMSProp update; bumps ``params.version``."""
    for name, g in grads.items():
        if g.shape != params.arrays[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise Divergence(f"non-finite gradient in {name}")
    for name, g in grads.items():
        w = params.arrays[name]
        acc = opt.acc.get(name)
        if acc is None:
            acc = opt.acc[name] = np.zeros_like(w)
        if w.dtype == np.float64 and w.flags.c_contiguous and acc.flags.c_contiguous:
            _rms_update(w.reshape(-1), acc.reshape(-1), np.ascontiguousarray(g, np.float64).reshape(-1),
                        opt.lr, opt.rho, opt.eps)
        else:
            acc *= opt.rho
            acc += (1.0 - opt.rho) * g * g
            w -= opt.lr * g / np.sqrt(acc + opt.eps)
    params.version += 1
    return params


def clone_into(src: NetworkParams, dst: NetworkParams) -> None:
    if src.spec.layer_shapes() != dst.spec.layer_shapes():
        raise ValueError("cannot clone between networks of different shapes")
    for name, a in src.arrays.items():
        target = dst.arrays[name]
        if not target.flags.writeable:
            dst.arrays[name] = a.copy()
        else:
            np.copyto(target, a)
    dst.version = src.version


# ----------------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------------


def save_checkpoint(params: NetworkParams, path: str | Path, hyper: Optional[dict] = None) -> None:
    """Binary checkpoint plus ``<path>.json`` sidecar.

    Layout: magic (8 bytes) | format u32 | n_actions u32 | version u64 | then
    every array of :meth:`NetSpec.layer_shapes` in order, C-contiguous,
    little-endian float64.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIQ", CHECKPOINT_FORMAT, params.spec.n_actions, params.version))
        for name in params.spec.layer_shapes():
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
    sidecar = {"format": CHECKPOINT_FORMAT, "spec": params.spec.to_dict(), "hyper": hyper or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    spec = NetSpec.from_dict(sidecar["spec"])
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a Q-network checkpoint")
    fmt, n_actions, version = struct.unpack_from("<IIQ", raw, 8)
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {fmt}")
    if n_actions != spec.n_actions:
        raise ValueError("checkpoint header disagrees with sidecar")
    off = 8 + struct.calcsize("<IIQ")
    arrays = {}
    for name, shape in spec.layer_shapes().items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError("checkpoint size does not match architecture")
    return NetworkParams(spec, arrays, version), sidecar.get("hyper", {})
