"""Neural signed distance field with a hybrid hash-grid / Fourier encoding.

    f(x) = M_sdf([M_hash(hash(x)) + alpha * M_rff(rff(x)) | x])

Every MLP has one softplus hidden layer and a linear output. Backward passes
are written out per layer. Forward passes can carry three tangents (one per
input axis) so the analytic input gradient, and gradients *of* it with
respect to the parameters, come out of the same machinery.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoding import (
    HashGridConfig,
    encode_rff,
    hash_backward,
    hash_forward,
    hash_jacobian,
    init_hash_tables,
    init_rff,
    rff_jacobian,
)
from .geometry import NormalizationTransform

SOFTPLUS_FLOOR = 50.0
SOFTPLUS_SWITCH = 20.0
PARAM_ORDER = (
    "hash_tables",
    "rff_B",
    "hash_W1",
    "hash_b1",
    "hash_W2",
    "hash_b2",
    "rff_W1",
    "rff_b1",
    "rff_W2",
    "rff_b2",
    "sdf_W1",
    "sdf_b1",
    "sdf_W2",
    "sdf_b2",
)
FROZEN = frozenset({"rff_B"})
LEARNED = tuple(n for n in PARAM_ORDER if n not in FROZEN)
MLP_WEIGHTS = frozenset({"hash_W1", "hash_W2", "rff_W1", "rff_W2", "sdf_W1", "sdf_W2"})
_EVAL_CHUNK = 1 << 16
_ROW_BLOCK = 32


class FieldError(RuntimeError):
    pass


class NonFiniteParameterError(FieldError):
    pass


class GeometricInitError(FieldError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    rff_dim: int = 64
    rff_var: float = 1.0
    hidden_enc: int = 128
    out_enc: int = 128
    hidden_sdf: int = 256
    alpha: float = 0.1
    beta_act: float = 100.0

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hash
        return {
            "hash_tables": (h.levels, h.table_size, h.features),
            "rff_B": (self.rff_dim // 2, 3),
            "hash_W1": (self.hidden_enc, h.output_dim),
            "hash_b1": (self.hidden_enc,),
            "hash_W2": (self.out_enc, self.hidden_enc),
            "hash_b2": (self.out_enc,),
            "rff_W1": (self.hidden_enc, self.rff_dim),
            "rff_b1": (self.hidden_enc,),
            "rff_W2": (self.out_enc, self.hidden_enc),
            "rff_b2": (self.out_enc,),
            "sdf_W1": (self.hidden_sdf, self.out_enc + 3),
            "sdf_b1": (self.hidden_sdf,),
            "sdf_W2": (1, self.hidden_sdf),
            "sdf_b2": (1,),
        }

    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.shapes().values())


@dataclass(frozen=True)
class GradientMode:
    kind: str = "numerical"
    step: float | None = None

    def __post_init__(self):
        if self.kind not in ("numerical", "analytic"):
            raise ValueError(f"unknown gradient mode {self.kind!r}")
        if self.kind == "numerical" and self.step is not None and self.step <= 0:
            raise ValueError("numerical gradient step must be positive")

    def resolve_step(self, config: FieldConfig) -> float:
        # half the finest hash cell
        return self.step if self.step is not None else 0.5 * config.hash.finest_cell

    @classmethod
    def parse(cls, text: str) -> "GradientMode":
        text = text.strip().lower()
        if text in ("analytic", "analyticforward", "analytic_forward"):
            return cls("analytic")
        if text.startswith("numerical"):
            _, _, h = text.partition(":")
            return cls("numerical", float(h) if h else None)
        raise ValueError(f"unknown gradient mode {text!r}")


@dataclass
class FieldParams:
    config: FieldConfig
    tensors: dict[str, np.ndarray]
    normalization: NormalizationTransform = field(default_factory=NormalizationTransform)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["sdf_W1"].dtype

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.normalization)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.normalization)

    def check_finite(self) -> None:
        for name in PARAM_ORDER:
            if not np.all(np.isfinite(self.tensors[name])):
                raise NonFiniteParameterError(f"non-finite values in {name}")


def _linear_init(rng, fan_out, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


def init_params(config: FieldConfig, seed: int = 0, dtype=np.float32) -> FieldParams:
    """Fresh parameters with uniform fan-in initialisation (no geometric prior)."""
    rng = np.random.default_rng([seed, 0xF1E1D])
    t: dict[str, np.ndarray] = {}
    t["hash_tables"] = init_hash_tables(config.hash, rng, dtype)
    t["rff_B"] = init_rff(config.rff_dim, config.rff_var, rng, dtype)
    shapes = config.shapes()
    for prefix in ("hash", "rff", "sdf"):
        o, i = shapes[f"{prefix}_W1"]
        t[f"{prefix}_W1"], t[f"{prefix}_b1"] = _linear_init(rng, o, i)
        o, i = shapes[f"{prefix}_W2"]
        t[f"{prefix}_W2"], t[f"{prefix}_b2"] = _linear_init(rng, o, i)
    t = {k: np.ascontiguousarray(t[k], dtype=dtype) for k in PARAM_ORDER}
    return FieldParams(config, t)


# --- layers ---------------------------------------------------------------


def softplus(a, beta):
    """Returns (softplus, sigmoid, linear-mask) with the linear asymptote beyond beta*a > 20."""
    t = beta * a
    # |t| is capped so exp never yields denormals (slow on most CPUs); the
    # effect is below 1e-21 in every output. Branch-free on purpose:
    # np.where over a random mask is several times slower than arithmetic.
    e = np.abs(t)
    np.minimum(e, SOFTPLUS_FLOOR, out=e)
    np.negative(e, out=e)
    np.exp(e, out=e)
    y = np.log1p(e)
    y += np.maximum(t, 0)
    y /= beta
    # sigmoid from the same exponential: 1/(1+e) for t >= 0, e/(1+e) below
    pos = t >= 0
    sig = e * ~pos
    sig += pos
    e += 1
    sig /= e
    lin = t > SOFTPLUS_SWITCH
    if lin.any():
        # exact select for finite inputs: y*1 + a*0 or y*0 + a*1
        keep = ~lin
        y *= keep
        y += a * lin
        sig *= keep
        sig += lin
    return y.astype(a.dtype, copy=False), sig.astype(a.dtype, copy=False), lin


@dataclass
class _MLPCache:
    x: np.ndarray
    xdot: np.ndarray | None
    s: np.ndarray
    sig: np.ndarray
    adot: np.ndarray | None = None
    sdot: np.ndarray | None = None
    dsig: np.ndarray | None = None


def mlp_forward(x, xdot, W1, b1, W2, b2, beta, keep=True):
    a = x @ W1.T + b1
    s, sig, lin = softplus(a, beta)
    z = s @ W2.T + b2
    zdot = None
    cache = None
    if xdot is not None:
        adot = xdot @ W1.T
        sdot = sig * adot
        zdot = sdot @ W2.T
        dsig = (beta * sig * (1 - sig) * ~lin).astype(a.dtype, copy=False)
        if keep:
            cache = _MLPCache(x, xdot, s, sig, adot, sdot, dsig)
    elif keep:
        cache = _MLPCache(x, None, s, sig)
    return z, zdot, cache


def mlp_backward(cache: _MLPCache, dz, dzdot, W1, W2, need_input=True):
    """Gradients of (W1, b1, W2, b2) and of the inputs (primal, tangents)."""
    dW2 = dz.T @ cache.s
    db2 = dz.sum(axis=0)
    # a width-1 output makes this an outer product; broadcasting beats BLAS there
    ds = dz * W2 if W2.shape[0] == 1 else dz @ W2
    da = ds * cache.sig
    dxdot = None
    if dzdot is not None:
        dW2 += np.einsum("kno,knh->oh", dzdot, cache.sdot)
        dsdot = dzdot @ W2
        da += np.einsum("knh,knh->nh", dsdot, cache.adot) * cache.dsig
        dadot = dsdot * cache.sig
    dW1 = da.T @ cache.x
    db1 = da.sum(axis=0)
    if dzdot is not None:
        dW1 += np.einsum("knh,kni->hi", dadot, cache.xdot)
    dx = da @ W1 if need_input else None
    if dzdot is not None and need_input:
        dxdot = dadot @ W1
    return (dW1, db1, dW2, db2), dx, dxdot


# --- field ------------------------------------------------------------------


@dataclass
class ForwardCache:
    hcache: object
    hash_mlp: _MLPCache
    rff_mlp: _MLPCache
    sdf_mlp: _MLPCache
    tangents: bool


def _forward(params: FieldParams, x: np.ndarray, tangents: bool = False, keep: bool = True):
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    xs = x.astype(dt)
    H, hcache = hash_forward(x, P["hash_tables"], cfg.hash, jacobian=tangents, store=keep)
    Hdot = hash_jacobian(P["hash_tables"], hcache) if tangents else None
    R = encode_rff(xs, P["rff_B"])
    Rdot = rff_jacobian(xs, P["rff_B"]) if tangents else None
    beta = dt.type(cfg.beta_act)
    zh, zhdot, ch = mlp_forward(H, Hdot, P["hash_W1"], P["hash_b1"], P["hash_W2"], P["hash_b2"], beta, keep)
    zr, zrdot, cr = mlp_forward(R, Rdot, P["rff_W1"], P["rff_b1"], P["rff_W2"], P["rff_b2"], beta, keep)
    alpha = dt.type(cfg.alpha)
    zf = np.concatenate([zh + alpha * zr, xs], axis=1)
    zfdot = None
    if tangents:
        eye = np.broadcast_to(np.eye(3, dtype=dt)[:, None, :], (3, len(x), 3))
        zfdot = np.concatenate([zhdot + alpha * zrdot, eye], axis=2)
    f, fdot, cs = mlp_forward(zf, zfdot, P["sdf_W1"], P["sdf_b1"], P["sdf_W2"], P["sdf_b2"], beta, keep)
    grad = fdot[:, :, 0].T if tangents else None
    cache = ForwardCache(hcache, ch, cr, cs, tangents) if keep else None
    return f[:, 0], grad, cache


def _backward(params: FieldParams, cache: ForwardCache, df, dgrad=None) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/df (N,) and optionally dL/d(grad_x f) (N, 3)."""
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    alpha = dt.type(cfg.alpha)
    O = cfg.out_enc
    dz = np.asarray(df, dtype=dt).reshape(-1, 1)
    dzdot = None
    if dgrad is not None:
        dzdot = np.ascontiguousarray(np.asarray(dgrad, dtype=dt).T[:, :, None])
    g: dict[str, np.ndarray] = {}
    (g["sdf_W1"], g["sdf_b1"], g["sdf_W2"], g["sdf_b2"]), dzf, dzfdot = mlp_backward(
        cache.sdf_mlp, dz, dzdot, P["sdf_W1"], P["sdf_W2"]
    )
    dzc = dzf[:, :O]
    dzcdot = dzfdot[:, :, :O] if dzfdot is not None else None
    (g["hash_W1"], g["hash_b1"], g["hash_W2"], g["hash_b2"]), dH, dHdot = mlp_backward(
        cache.hash_mlp, dzc, dzcdot, P["hash_W1"], P["hash_W2"]
    )
    (g["rff_W1"], g["rff_b1"], g["rff_W2"], g["rff_b2"]), _, _ = mlp_backward(
        cache.rff_mlp,
        alpha * dzc,
        alpha * dzcdot if dzcdot is not None else None,
        P["rff_W1"],
        P["rff_W2"],
        need_input=False,
    )
    gt = np.zeros_like(P["hash_tables"])
    hash_backward(gt, cache.hcache, dH, dHdot)
    g["hash_tables"] = gt
    return {k: g[k] for k in LEARNED}


def field_forward(x, params: FieldParams, check: bool = True):
    """SDF values at one point (3,) or a batch (N, 3), in normalized coordinates."""
    if check:
        params.check_finite()
    xa = np.asarray(x, dtype=np.float64)
    single = xa.ndim == 1
    xa = xa.reshape(-1, 3)
    out = np.empty(len(xa), dtype=params.dtype)
    for s in range(0, len(xa), _EVAL_CHUNK):
        xs = xa[s : s + _EVAL_CHUNK]
        n = len(xs)
        # BLAS picks different kernels (and summation orders) for short
        # batches; padding to whole row blocks makes every point's value
        # independent of how the batch was split
        m = -(-n // _ROW_BLOCK) * _ROW_BLOCK
        if m != n:
            xs = np.concatenate([xs, np.zeros((m - n, 3))])
        out[s : s + n] = _forward(params, xs, keep=False)[0][:n]
    return float(out[0]) if single else out


def field_evaluator(params: FieldParams):
    """Callable x -> f(x) without per-call parameter checks (for grids/metrics)."""
    params.check_finite()
    return lambda x: field_forward(x, params, check=False)


def numerical_offsets(x: np.ndarray, h: float) -> np.ndarray:
    """(6N, 3) stacked x+h e0, x-h e0, x+h e1, x-h e1, x+h e2, x-h e2."""
    out = np.repeat(x[None], 6, axis=0)
    for k in range(3):
        out[2 * k, :, k] += h
        out[2 * k + 1, :, k] -= h
    return out.reshape(-1, 3)


def input_gradient(x, params: FieldParams, mode: GradientMode = GradientMode()):
    """Spatial gradient of f at one point or a batch."""
    xa = np.asarray(x, dtype=np.float64)
    single = xa.ndim == 1
    xa = xa.reshape(-1, 3)
    out = np.empty((len(xa), 3))
    chunk = _EVAL_CHUNK // 8
    for s in range(0, len(xa), chunk):
        xs = xa[s : s + chunk]
        if mode.kind == "analytic":
            out[s : s + chunk] = _forward(params, xs, tangents=True, keep=False)[1]
        else:
            h = mode.resolve_step(params.config)
            f = field_forward(numerical_offsets(xs, h), params, check=False).astype(np.float64)
            f = f.reshape(6, len(xs))
            out[s : s + chunk] = ((f[0::2] - f[1::2]) / (2 * h)).T
    return out[0] if single else out


def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def geometric_init(
    params: FieldParams,
    radius: float = 0.5,
    seed: int = 0,
    verify: bool = True,
    encoder_scale: float = 1e-3,
) -> FieldParams:
    """Make the fresh field approximate ||x|| - radius.

    Hidden units of the SDF head read the raw coordinates along directions
    spread evenly over the sphere; with output weights 4/H the mean of
    relu(d . x) over the sphere of directions (||x||/4) reproduces the norm.
    Encoder columns get small random weights so the encoders start as a
    perturbation. The result is checked on random points.
    """
    cfg = params.config
    out = params.copy()
    dt = params.dtype
    rng = np.random.default_rng([seed, 0x6E0])
    H = cfg.hidden_sdf
    dirs = _fibonacci_directions(H)
    dirs = dirs[rng.permutation(H)]
    W1 = np.empty((H, cfg.out_enc + 3))
    W1[:, : cfg.out_enc] = rng.normal(0.0, encoder_scale / math.sqrt(cfg.out_enc), (H, cfg.out_enc))
    W1[:, cfg.out_enc :] = dirs
    out.tensors["sdf_W1"] = W1.astype(dt)
    out.tensors["sdf_b1"] = np.zeros(H, dtype=dt)
    out.tensors["sdf_W2"] = np.full((1, H), 4.0 / H, dtype=dt)
    out.tensors["sdf_b2"] = np.array([-radius], dtype=dt)
    if verify:
        check_geometric_init(out, radius, seed)
    return out


def check_geometric_init(params: FieldParams, radius: float, seed: int = 0, n: int = 4096, tol: float = 0.1) -> float:
    pts = np.random.default_rng([seed, 0xC4EC]).uniform(-1, 1, (n, 3))
    dev = np.abs(field_forward(pts, params) - (np.linalg.norm(pts, axis=1) - radius))
    worst = float(dev.max())
    if worst > tol:
        raise GeometricInitError(
            f"geometric init deviates from the sphere by {worst:.3g} (> {tol}); try another seed"
        )
    return worst


# --- checkpoint ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSDF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sH")
_CONFIG = struct.Struct("<IIIIQIdIIIdd3dd")
_CONFIG_FIELDS = (
    "hash_levels",
    "hash_nmin",
    "hash_nmax",
    "hash_feat",
    "hash_table_size",
    "rff_dim",
    "rff_var",
    "hidden_enc",
    "out_enc",
    "hidden_sdf",
    "alpha",
    "beta_act",
)
HEADER_SIZE = _HEADER.size + _CONFIG.size


class CheckpointError(ValueError):
    code = 2


class BadMagicError(CheckpointError):
    code = 10


class VersionMismatchError(CheckpointError):
    code = 11


class TruncatedCheckpointError(CheckpointError):
    code = 12


class ConfigMismatchError(CheckpointError):
    code = 13


def _config_values(cfg: FieldConfig) -> tuple:
    h = cfg.hash
    return (
        h.levels,
        h.n_min,
        h.n_max,
        h.features,
        h.table_size,
        cfg.rff_dim,
        float(cfg.rff_var),
        cfg.hidden_enc,
        cfg.out_enc,
        cfg.hidden_sdf,
        float(cfg.alpha),
        float(cfg.beta_act),
    )


def checkpoint_bytes(params: FieldParams) -> bytes:
    cfg = params.config
    n = params.normalization
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    block = _CONFIG.pack(*_config_values(cfg), *n.center.tolist(), n.scale)
    blob = b"".join(np.ascontiguousarray(params.tensors[k], dtype="<f4").tobytes() for k in PARAM_ORDER)
    return header + block + blob


def save_checkpoint(params: FieldParams, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path, expected: FieldConfig | None = None) -> FieldParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("truncated header")
    magic, version = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError("bad magic")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < HEADER_SIZE:
        raise TruncatedCheckpointError("truncated config block")
    vals = _CONFIG.unpack_from(data, _HEADER.size)
    cfg_vals = vals[: len(_CONFIG_FIELDS)]
    center, scale = vals[len(_CONFIG_FIELDS) : len(_CONFIG_FIELDS) + 3], vals[-1]
    if expected is not None:
        for name, got, want in zip(_CONFIG_FIELDS, cfg_vals, _config_values(expected)):
            if got != want:
                raise ConfigMismatchError(f"config field {name}: checkpoint has {got}, expected {want}")
    (levels, n_min, n_max, feat, table, rff_dim, rff_var, hid_e, out_e, hid_s, alpha, beta) = cfg_vals
    cfg = FieldConfig(
        HashGridConfig(levels, n_min, n_max, feat, table), rff_dim, rff_var, hid_e, out_e, hid_s, alpha, beta
    )
    shapes = cfg.shapes()
    expected_len = HEADER_SIZE + 4 * cfg.param_count()
    if len(data) < expected_len:
        raise TruncatedCheckpointError(f"parameter blob truncated ({len(data)} < {expected_len} bytes)")
    if len(data) > expected_len:
        raise CheckpointError("trailing bytes after parameter blob")
    tensors = {}
    off = HEADER_SIZE
    for k in PARAM_ORDER:
        cnt = math.prod(shapes[k])
        tensors[k] = np.frombuffer(data, dtype="<f4", count=cnt, offset=off).reshape(shapes[k]).astype(np.float32)
        off += 4 * cnt
    return FieldParams(cfg, tensors, NormalizationTransform(np.array(center), scale))


def with_normalization(params: FieldParams, transform: NormalizationTransform) -> FieldParams:
    return replace(params, normalization=transform)
