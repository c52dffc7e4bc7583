"""Model configuration, seeded weights, tensor files and the golden FP32
Mamba forward pass the simulator is checked against.

Tensors are plain ``numpy.float32`` arrays in row-major order. Every
reference op fixes its floating-point accumulation order so results are
reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .approx import (
    ExpParams,
    default_exp_params,
    exp_exact_array,
    fast_exp_array,
    silu_exact_array,
    silu_piecewise_array,
)

F32 = np.float32
TREE_WIDTH = 16

# (layers, hidden size) per named model
PRESETS: dict[str, tuple[int, int]] = {
    "130M": (24, 768),
    "370M": (48, 1024),
    "790M": (48, 1536),
    "1.4B": (48, 2048),
    "2.8B": (64, 2560),
}


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, token: int | None = None):
        super().__init__(message)
        self.token = token


class Discretization(str, Enum):
    EULER = "euler"
    ZOH_EXP = "zoh-exp"


class Nonlinearity(str, Enum):
    EXACT = "exact"
    APPROX = "approx"


class Reduction(str, Enum):
    SEQUENTIAL = "sequential"
    TREE = "tree"


@dataclass(frozen=True)
class MambaConfig:
    n_layers: int
    d_model: int
    d_inner: int
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int = 1
    seq_len: int = 1
    discretization: Discretization = Discretization.ZOH_EXP
    eps_norm: float = 1e-5
    delta_softplus: bool = False
    seed: int = 0
    preset: str | None = None
    scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "discretization", Discretization(self.discretization))
        for name in ("n_layers", "d_model", "d_inner", "d_state", "d_conv", "dt_rank", "seq_len", "scale"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_inner % self.d_model:
            raise ValueError(f"d_inner={self.d_inner} is not a multiple of d_model={self.d_model}")
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
            layers, hidden = PRESETS[self.preset]
            if self.scale == 1 and self.d_model != hidden:
                raise ValueError(f"preset {self.preset} has d_model={hidden}, got {self.d_model}")
        if not self.eps_norm >= 0:
            raise ValueError("eps_norm must be non-negative")

    @property
    def expand_factor(self) -> int:
        return self.d_inner // self.d_model

    @property
    def is_proxy(self) -> bool:
        if self.preset is None:
            return False
        return self.scale != 1 or (self.n_layers, self.d_model) != PRESETS[self.preset]

    @classmethod
    def from_dims(cls, d_model: int, *, n_layers: int = 1, expand: int = 2, **kw) -> "MambaConfig":
        kw.setdefault("dt_rank", math.ceil(d_model / 16))
        return cls(n_layers=n_layers, d_model=d_model, d_inner=expand * d_model, **kw)

    @classmethod
    def from_preset(cls, name: str, seq_len: int = 1, *, scale: int = 1,
                    n_layers: int | None = None, **kw) -> "MambaConfig":
        """Named model from the preset table. ``scale`` > 1 (or a layer
        override) produces a desk-scale proxy that keeps the preset label."""
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        layers, hidden = PRESETS[name]
        if hidden % scale:
            raise ValueError(f"scale {scale} does not divide hidden size {hidden}")
        return cls.from_dims(hidden // scale, n_layers=n_layers or layers, seq_len=seq_len,
                             preset=name, scale=scale, **kw)

    def with_seq_len(self, seq_len: int) -> "MambaConfig":
        return replace(self, seq_len=seq_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["discretization"] = self.discretization.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MambaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def tiny_config(seq_len: int = 8, seed: int = 5, **kw) -> MambaConfig:
    """d_model=4, d_inner=8, N=2: the configuration used for parity checks."""
    kw.setdefault("d_state", 2)
    return MambaConfig.from_dims(4, seq_len=seq_len, seed=seed, **kw)


def load_config(path: str | Path) -> MambaConfig:
    return MambaConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: MambaConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# tensors


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def save_tensor(arr: np.ndarray, path: str | Path) -> Path:
    """Raw little-endian f32 payload plus a ``<path>.json`` descriptor."""
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(arr.tobytes())
    desc = {"shape": list(arr.shape), "dtype": "f32", "order": "row-major"}
    Path(str(path) + ".json").write_text(json.dumps(desc, sort_keys=True) + "\n")
    return path


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    desc = json.loads(Path(str(path) + ".json").read_text())
    if desc.get("dtype") != "f32" or desc.get("order") != "row-major":
        raise ValueError(f"unsupported tensor descriptor {desc}")
    shape = tuple(int(s) for s in desc["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != math.prod(shape):
        raise DimensionError(f"{path}: payload has {data.size} values, shape {shape} needs {math.prod(shape)}")
    return data.astype(np.float32).reshape(shape)


# ---------------------------------------------------------------------------
# weights


@dataclass
class LayerWeights:
    norm_gamma: np.ndarray  # [d_model]
    norm_beta: np.ndarray  # [d_model]
    in_proj: np.ndarray  # [d_model, 2*d_inner]; columns are (x branch | gate branch)
    conv_w: np.ndarray  # [d_inner, d_conv]
    x_proj: np.ndarray  # [d_inner, dt_rank + 2*d_state]; columns are (dt | B | C)
    dt_proj: np.ndarray  # [dt_rank, d_inner]
    dt_bias: np.ndarray  # [d_inner]
    A_log: np.ndarray  # [d_inner, d_state]
    D_skip: np.ndarray  # [d_inner]
    out_proj: np.ndarray  # [d_inner, d_model]

    @property
    def A(self) -> np.ndarray:
        return (-np.exp(self.A_log.astype(np.float32))).astype(np.float32)

    def split_x_proj(self, cfg: MambaConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        r, n = cfg.dt_rank, cfg.d_state
        xp = self.x_proj
        return (np.ascontiguousarray(xp[:, :r]), np.ascontiguousarray(xp[:, r:r + n]),
                np.ascontiguousarray(xp[:, r + n:r + 2 * n]))

    def split_in_proj(self, cfg: MambaConfig) -> tuple[np.ndarray, np.ndarray]:
        di = cfg.d_inner
        return np.ascontiguousarray(self.in_proj[:, :di]), np.ascontiguousarray(self.in_proj[:, di:])

    def check(self, cfg: MambaConfig) -> None:
        dm, di, n, k, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
        expected = {
            "norm_gamma": (dm,), "norm_beta": (dm,), "in_proj": (dm, 2 * di),
            "conv_w": (di, k), "x_proj": (di, r + 2 * n), "dt_proj": (r, di),
            "dt_bias": (di,), "A_log": (di, n), "D_skip": (di,), "out_proj": (di, dm),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"weight {name} has shape {got}, config implies {shape}")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def make_weights(cfg: MambaConfig, seed: int | None = None) -> list[LayerWeights]:
    """Seeded synthetic weights with S4D-real style ``A = -(1..N)``."""
    seed = cfg.seed if seed is None else seed
    rng = _rng(seed, 0)
    dm, di, n, k, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(
            norm_gamma=(1.0 + normal(dm, 0.1)).astype(np.float32),
            norm_beta=normal(dm, 0.1),
            in_proj=normal((dm, 2 * di), 1.0 / math.sqrt(dm)),
            conv_w=normal((di, k), 1.0 / math.sqrt(k)),
            x_proj=normal((di, r + 2 * n), 1.0 / math.sqrt(di)),
            dt_proj=normal((r, di), 0.1 / math.sqrt(r)),
            dt_bias=rng.uniform(0.05, 0.4, di).astype(np.float32),
            A_log=np.tile(np.log(np.arange(1, n + 1, dtype=np.float32)), (di, 1)).astype(np.float32),
            D_skip=(1.0 + normal(di, 0.1)).astype(np.float32),
            out_proj=normal((di, dm), 1.0 / math.sqrt(di)),
        ))
    return layers


def zero_weights(cfg: MambaConfig) -> list[LayerWeights]:
    w = make_weights(cfg)
    for lw in w:
        for f in fields(lw):
            setattr(lw, f.name, np.zeros_like(getattr(lw, f.name)))
    return w


def make_input(cfg: MambaConfig, seed: int | None = None) -> np.ndarray:
    seed = cfg.seed if seed is None else seed
    return _rng(seed, 1).standard_normal((cfg.seq_len, cfg.d_model)).astype(np.float32)


# ---------------------------------------------------------------------------
# reference ops


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")


def matmul_ref(a, b, acc=None) -> np.ndarray:
    """c[i,j] = acc[i,j] + sum_p a[i,p]*b[p,j], accumulated p = 0..k-1 in order.

    ``acc`` (default zeros) may be ``[n]`` or ``[m, n]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_matmul(a, b)
    m, k = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.float32)
    if acc is not None:
        out = out + as_tensor(acc)  # 0 + acc is exact
    for p in range(k):
        out += a[:, p:p + 1] * b[p:p + 1, :]
    return out


def tree_reduce(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise-adjacent reduction of the last axis (length 16) down to two
    partial sums ``(left, right)``; the caller adds the third input."""
    v = values
    if v.shape[-1] != TREE_WIDTH:
        raise DimensionError(f"reduction slice needs {TREE_WIDTH} inputs, got {v.shape[-1]}")
    while v.shape[-1] > 2:
        v = v[..., 0::2] + v[..., 1::2]
    return v[..., 0], v[..., 1]


def tree_matmul(a, b, acc=None, *, row_block: int = 256) -> np.ndarray:
    """Matmul in the reduction-tree order of the PE array.

    k is processed in zero-padded chunks of 16. Each chunk is summed by a
    balanced tree of adjacent pairs and its last level adds the running
    accumulator as a third input: ``acc = (left + right) + acc``.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_matmul(a, b)
    m, k = a.shape
    n = b.shape[1]
    chunks = max(1, -(-k // TREE_WIDTH))
    kp = chunks * TREE_WIDTH
    ap = np.zeros((m, kp), dtype=np.float32)
    ap[:, :k] = a
    bp = np.zeros((kp, n), dtype=np.float32)
    bp[:k] = b
    bt = bp.reshape(chunks, TREE_WIDTH, n).transpose(0, 2, 1)  # [chunks, n, 16]
    out = np.zeros((m, n), dtype=np.float32)
    if acc is not None:
        out = out + as_tensor(acc)
    for r0 in range(0, m, row_block):
        at = ap[r0:r0 + row_block].reshape(-1, chunks, 1, TREE_WIDTH)  # [rows, chunks, 1, 16]
        prod = at * bt[None]  # [rows, chunks, n, 16]
        left, right = tree_reduce(prod)
        partial = left + right
        blk = out[r0:r0 + row_block]
        for c in range(chunks):
            blk = partial[:, c] + blk
        out[r0:r0 + row_block] = blk
    return out


def conv1d_ref(x, w) -> np.ndarray:
    """Causal depthwise conv: y[t,d] = sum_j w[d,j] * x[t-K+1+j, d], j ascending."""
    x, w = as_tensor(x, 2, "x"), as_tensor(w, 2, "w")
    L, D = x.shape
    if w.shape[0] != D:
        raise DimensionError(f"conv weight {w.shape} does not match {D} channels")
    K = w.shape[1]
    xp = np.zeros((L + K - 1, D), dtype=np.float32)
    xp[K - 1:] = x
    return conv1d_padded(xp, np.ascontiguousarray(w.T), L)


def conv1d_padded(xp: np.ndarray, w_t: np.ndarray, L: int) -> np.ndarray:
    """Same as :func:`conv1d_ref` on an already left-padded input and a
    ``[K, D]`` (tap-major) weight layout."""
    K = w_t.shape[0]
    y = np.zeros((L, xp.shape[1]), dtype=np.float32)
    for j in range(K):
        y = y + xp[j:j + L] * w_t[j]
    return y


def layernorm_ref(x, gamma, beta, eps: float) -> np.ndarray:
    """Row-wise layer norm with population variance, sums accumulated in
    column order."""
    x = as_tensor(x, 2, "x")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    L, D = x.shape
    if D < 1:
        raise DimensionError("layernorm needs at least one column")
    s = np.zeros(L, dtype=np.float32)
    for j in range(D):
        s = s + x[:, j]
    mean = s / F32(D)
    dev = x - mean[:, None]
    sq = np.zeros(L, dtype=np.float32)
    for j in range(D):
        sq = sq + dev[:, j] * dev[:, j]
    var = sq / F32(D)
    inv = F32(1.0) / np.sqrt(var + F32(eps))
    return ((dev * inv[:, None]) * gamma) + beta


def _matmul(reduction: Reduction):
    return tree_matmul if Reduction(reduction) is Reduction.TREE else matmul_ref


def _kernels(nonlinearity: Nonlinearity, exp_params: ExpParams | None):
    if Nonlinearity(nonlinearity) is Nonlinearity.EXACT:
        return exp_exact_array, silu_exact_array
    params = exp_params or default_exp_params()
    return (lambda v: fast_exp_array(v, params)[0]), silu_piecewise_array


def selective_scan_ref(x, delta, A, B, C, D_skip=None,
                       mode: Discretization = Discretization.ZOH_EXP, *,
                       exp_fn=None, reduction: Reduction = Reduction.SEQUENTIAL) -> np.ndarray:
    """Selective scan with zero initial state.

    Shapes: x, delta [L, d_inner]; A [d_inner, N]; B, C [L, N]; D_skip [d_inner].
    Per token: ``h = Abar*h + (delta (x) B)*x`` and ``y = h . C``.
    """
    x, delta = as_tensor(x, 2, "x"), as_tensor(delta, 2, "delta")
    A, B, C = as_tensor(A, 2, "A"), as_tensor(B, 2, "B"), as_tensor(C, 2, "C")
    L, di = x.shape
    N = A.shape[1]
    if delta.shape != (L, di) or A.shape[0] != di or B.shape != (L, N) or C.shape != (L, N):
        raise DimensionError(f"inconsistent scan shapes x{x.shape} delta{delta.shape} "
                             f"A{A.shape} B{B.shape} C{C.shape}")
    mode = Discretization(mode)
    exp_fn = exp_fn or exp_exact_array
    mm = _matmul(reduction)
    dA = delta[:, :, None] * A[None]
    with np.errstate(over="ignore", invalid="ignore"):
        abar = exp_fn(dA) if mode is Discretization.ZOH_EXP else dA + F32(1.0)
    h = np.zeros((di, N), dtype=np.float32)
    y = np.zeros((L, di), dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(L):
            dB = delta[n][:, None] * B[n][None, :]
            u = dB * x[n][:, None]
            h = (abar[n] * h) + u
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite hidden state at token {n}", token=n)
            y[n] = mm(h, C[n][:, None])[:, 0]
    if D_skip is not None:
        y = y + x * as_tensor(D_skip)
    return y


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(v.astype(np.float64))).astype(np.float32)


def mamba_block_ref(x, w: LayerWeights, cfg: MambaConfig, *,
                    nonlinearity: Nonlinearity = Nonlinearity.APPROX,
                    reduction: Reduction = Reduction.SEQUENTIAL,
                    exp_params: ExpParams | None = None) -> np.ndarray:
    """One residual Mamba block; op order matches the compiler's lowering."""
    x = as_tensor(x, 2, "x")
    if x.shape[1] != cfg.d_model:
        raise DimensionError(f"input width {x.shape[1]} != d_model {cfg.d_model}")
    w.check(cfg)
    mm = _matmul(reduction)
    exp_fn, silu = _kernels(nonlinearity, exp_params)
    w_x, w_z = w.split_in_proj(cfg)
    w_dt, w_b, w_c = w.split_x_proj(cfg)

    xn = layernorm_ref(x, w.norm_gamma, w.norm_beta, cfg.eps_norm)
    xb = mm(xn, w_x)
    z = mm(xn, w_z)
    xs = silu(conv1d_ref(xb, w.conv_w))
    dt_low = mm(xs, w_dt)
    Bm = mm(xs, w_b)
    Cm = mm(xs, w_c)
    delta = mm(dt_low, w.dt_proj, w.dt_bias)
    if cfg.delta_softplus:
        delta = _softplus(delta)
    y = selective_scan_ref(xs, delta, w.A, Bm, Cm, w.D_skip, cfg.discretization,
                           exp_fn=exp_fn, reduction=reduction)
    gated = y * silu(z)
    return mm(gated, w.out_proj) + x


def mamba_model_ref(x, weights: list[LayerWeights], cfg: MambaConfig, **kw) -> np.ndarray:
    h = as_tensor(x, 2, "x")
    for lw in weights:
        h = mamba_block_ref(h, lw, cfg, **kw)
    return h
