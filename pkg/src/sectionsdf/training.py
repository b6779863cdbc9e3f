"""Losses, optimizer and the training loop.

The data term only supervises on-contour samples (L1 to zero) and samples
whose predicted inside/outside classification disagrees with their label
(squared error to the 2D SDF label). Everything else is left to the
Eikonal and minimum-surface regularizers evaluated on fresh volume points.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from dataclasses import field as dfield
from pathlib import Path
from typing import Callable

import numpy as np

from .encoding import HashGridConfig
from .field import (
    LEARNED,
    MLP_WEIGHTS,
    FieldConfig,
    FieldParams,
    GradientMode,
    _backward,
    _forward,
    geometric_init,
    init_params,
    numerical_offsets,
    save_checkpoint,
)
from .geometry import NORMALIZED_HALF_EXTENT, CrossSectionSet
from .sampling import SampleBank, SamplingSchedule, Tag, build_sample_bank, sample_regularization_batch

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iter", "loss_total", "loss_on", "loss_off", "loss_eik", "loss_min", "off_fraction", "lr")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, message, terms=None, last_good=None, checkpoint=None):
        super().__init__(message)
        self.terms = terms or {}
        self.last_good = last_good
        self.checkpoint = checkpoint


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_eik: float = 1e-3
    lambda_min: float = 5e-2
    beta_min: float = 100.0

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_min, self.beta_min) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch: int = 2**17
    reg_batch: int | None = None
    lr0: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    weight_decay: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = dfield(default_factory=LossWeights)
    schedule: SamplingSchedule = dfield(default_factory=SamplingSchedule)
    field: FieldConfig = dfield(default_factory=FieldConfig)
    grad_mode: GradientMode = dfield(default_factory=GradientMode)
    seed: int = 0
    deterministic: bool = True
    init_radius: float = 0.5
    data_loss: str = "symdiff"
    threads: int = 1

    def __post_init__(self):
        if self.data_loss not in ("symdiff", "l1_all"):
            raise ValueError(f"unknown data_loss {self.data_loss!r}")

    @property
    def reg_count(self) -> int:
        return self.reg_batch if self.reg_batch is not None else self.batch

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** (epoch // self.lr_decay_every)


# --- config file --------------------------------------------------------------


def _as_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pow2(text: str) -> int:
    return 2 ** int(text)


# key -> (section, attribute, parser); section None = TrainConfig itself
_KEYS: dict[str, tuple[str | None, str, Callable]] = {
    "epochs": (None, "epochs", int),
    "batch_log2": (None, "batch", _pow2),
    "reg_batch_log2": (None, "reg_batch", _pow2),
    "lr0": (None, "lr0", float),
    "lr_decay": (None, "lr_decay", float),
    "lr_decay_every": (None, "lr_decay_every", int),
    "weight_decay": (None, "weight_decay", float),
    "lambda_eik": ("weights", "lambda_eik", float),
    "lambda_min": ("weights", "lambda_min", float),
    "beta_min": ("weights", "beta_min", float),
    "beta_act": ("field", "beta_act", float),
    "alpha": ("field", "alpha", float),
    "rff_dim": ("field", "rff_dim", int),
    "rff_var": ("field", "rff_var", float),
    "hidden_enc": ("field", "hidden_enc", int),
    "out_enc": ("field", "out_enc", int),
    "hidden_sdf": ("field", "hidden_sdf", int),
    "hash_levels": ("hash", "levels", int),
    "hash_nmin_log2": ("hash", "n_min", _pow2),
    "hash_nmax_log2": ("hash", "n_max", _pow2),
    "hash_feat": ("hash", "features", int),
    "hash_table_log2": ("hash", "table_size", _pow2),
    "adaptive_sampler": ("schedule", "adaptive", _as_bool),
    "seed": (None, "seed", int),
    "grad_mode": (None, "grad_mode", GradientMode.parse),
    "deterministic": (None, "deterministic", _as_bool),
    "init_radius": (None, "init_radius", float),
    "data_loss": (None, "data_loss", str),
    "threads": (None, "threads", int),
}
CONFIG_KEYS = tuple(_KEYS)


def config_from_mapping(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    top, sub = {}, {"weights": {}, "field": {}, "hash": {}, "schedule": {}}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key: {key}")
        section, attr, parse = _KEYS[key]
        try:
            val = parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        (top if section is None else sub[section])[attr] = val
    hash_cfg = replace(base.field.hash, **sub["hash"])
    field_cfg = replace(base.field, hash=hash_cfg, **sub["field"])
    try:
        return replace(
            base,
            weights=replace(base.weights, **sub["weights"]),
            schedule=replace(base.schedule, **sub["schedule"]),
            field=field_cfg,
            **top,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        values[key.strip()] = val.strip()
    return config_from_mapping(values, base)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def config_to_text(cfg: TrainConfig) -> str:
    h = cfg.field.hash
    lines = {
        "epochs": cfg.epochs,
        "batch_log2": int(math.log2(cfg.batch)),
        "lr0": cfg.lr0,
        "lr_decay": cfg.lr_decay,
        "lr_decay_every": cfg.lr_decay_every,
        "weight_decay": cfg.weight_decay,
        "lambda_eik": cfg.weights.lambda_eik,
        "lambda_min": cfg.weights.lambda_min,
        "beta_min": cfg.weights.beta_min,
        "beta_act": cfg.field.beta_act,
        "alpha": cfg.field.alpha,
        "hash_levels": h.levels,
        "hash_nmin_log2": int(math.log2(h.n_min)),
        "hash_nmax_log2": int(math.log2(h.n_max)),
        "hash_feat": h.features,
        "hash_table_log2": int(math.log2(h.table_size)),
        "rff_dim": cfg.field.rff_dim,
        "rff_var": cfg.field.rff_var,
        "hidden_enc": cfg.field.hidden_enc,
        "out_enc": cfg.field.out_enc,
        "hidden_sdf": cfg.field.hidden_sdf,
        "seed": cfg.seed,
        "grad_mode": cfg.grad_mode.kind if cfg.grad_mode.step is None else f"numerical:{cfg.grad_mode.step!r}",
        "deterministic": str(cfg.deterministic).lower(),
        "adaptive_sampler": str(cfg.schedule.adaptive).lower(),
        "data_loss": cfg.data_loss,
        "init_radius": cfg.init_radius,
    }
    if cfg.reg_batch is not None:
        lines["reg_batch_log2"] = int(math.log2(cfg.reg_batch))
    return "".join(f"{k} = {v}\n" for k, v in lines.items())


def desk_config(**overrides) -> TrainConfig:
    """Single-CPU scale: small table and widths, batch 2^12, 100 epochs.

    The regularization batch drops to 2^10 so a sphere run fits in ten minutes.
    """
    base = TrainConfig(
        epochs=100,
        batch=2**12,
        reg_batch=2**10,
        field=FieldConfig(
            hash=HashGridConfig(levels=8, n_min=2**4, n_max=2**7, features=2, table_size=2**16),
            rff_dim=16,
            hidden_enc=32,
            out_enc=32,
            hidden_sdf=64,
        ),
    )
    return replace(base, **overrides)


# --- losses -------------------------------------------------------------------


def classify_symmetric_difference(tag, f2d, f):
    """Boolean masks (on, off, agree) over a batch.

    On-contour membership comes from the sample tag. The off set holds the
    remaining samples whose predicted sign differs from the label's sign.
    """
    tag = np.asarray(tag)
    on = tag == Tag.ON_CONTOUR
    off = ~on & (np.sign(np.asarray(f, dtype=np.float64)) != np.sign(np.asarray(f2d, dtype=np.float64)))
    return on, off, ~(on | off)


def loss_on(f, f2d=None) -> float:
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        return 0.0
    target = 0.0 if f2d is None else np.asarray(f2d, dtype=np.float64)
    return float(np.mean(np.abs(f - target)))


def loss_off(f, f2d) -> float:
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        return 0.0
    return float(np.mean((f - np.asarray(f2d, dtype=np.float64)) ** 2))


def eikonal_from_gradients(grad) -> float:
    g = np.asarray(grad, dtype=np.float64).reshape(-1, 3)
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def loss_eikonal(reg_x, params: FieldParams, mode: GradientMode = GradientMode()) -> float:
    from .field import input_gradient

    return eikonal_from_gradients(input_gradient(reg_x, params, mode))


def loss_min_surface(f, beta_min: float = 100.0) -> float:
    f = np.asarray(f, dtype=np.float64)
    return float(np.mean(np.exp(-beta_min * np.abs(f))))


def _data_terms(f, f2d, tag, data_loss):
    """Data losses and dL/df for one batch, in float64."""
    n = len(f)
    df = np.zeros(n)
    on, off, _ = classify_symmetric_difference(tag, f2d, f)
    n_on, n_off = int(on.sum()), int(off.sum())
    resid = f - f2d
    if data_loss == "l1_all":
        l_on = float(np.mean(np.abs(resid))) if n else 0.0
        df += np.sign(resid) / max(n, 1)
        l_off = 0.0
    else:
        l_on = float(np.mean(np.abs(resid[on]))) if n_on else 0.0
        if n_on:
            df[on] = np.sign(resid[on]) / n_on
        l_off = float(np.mean(resid[off] ** 2)) if n_off else 0.0
        if n_off:
            df[off] = 2.0 * resid[off] / n_off
    n_candidates = n - n_on
    return l_on, l_off, df, {"n_on": n_on, "n_off": n_off, "n_candidates": n_candidates}


def _eikonal_terms(grad):
    norm = np.linalg.norm(grad, axis=1)
    m = len(grad)
    l_eik = float(np.mean((norm - 1.0) ** 2))
    safe = np.where(norm > 0, norm, 1.0)
    dgrad = (2.0 * (norm - 1.0) / m / safe)[:, None] * grad
    return l_eik, dgrad


def _min_terms(f, beta):
    e = np.exp(-beta * np.abs(f))
    m = len(f)
    return float(np.mean(e)), -beta * np.sign(f) * e / m


def total_loss_and_grads(
    x,
    f2d,
    tag,
    reg_x,
    params: FieldParams,
    weights: LossWeights = LossWeights(),
    mode: GradientMode = GradientMode(),
    data_loss: str = "symdiff",
):
    """Total loss, gradients of every learned tensor, and the term breakdown."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    reg_x = np.asarray(reg_x, dtype=np.float64).reshape(-1, 3)
    f2d = np.asarray(f2d, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty batch")
    n, m = len(x), len(reg_x)
    lam_e, lam_m = weights.lambda_eik, weights.lambda_min

    if mode.kind == "numerical":
        h = mode.resolve_step(params.config)
        pts = np.concatenate([x, reg_x, numerical_offsets(reg_x, h)])
        f_all, _, cache = _forward(params, pts)
        f_all = f_all.astype(np.float64)
        fd, fr, fo = f_all[:n], f_all[n : n + m], f_all[n + m :].reshape(6, m)
        grad = ((fo[0::2] - fo[1::2]) / (2 * h)).T
        l_on, l_off, d_data, counts = _data_terms(fd, f2d, tag, data_loss)
        l_eik, dgrad = _eikonal_terms(grad)
        l_min, d_min = _min_terms(fr, weights.beta_min)
        df = np.empty(len(f_all))
        df[:n] = d_data
        df[n : n + m] = lam_m * d_min
        d_off = np.empty((6, m))
        d_off[0::2] = lam_e * dgrad.T / (2 * h)
        d_off[1::2] = -lam_e * dgrad.T / (2 * h)
        df[n + m :] = d_off.reshape(-1)
        grads = _backward(params, cache, df)
    else:
        fd, _, cache_d = _forward(params, x)
        fd = fd.astype(np.float64)
        fr, grad, cache_r = _forward(params, reg_x, tangents=True)
        fr, grad = fr.astype(np.float64), grad.astype(np.float64)
        l_on, l_off, d_data, counts = _data_terms(fd, f2d, tag, data_loss)
        l_eik, dgrad = _eikonal_terms(grad)
        l_min, d_min = _min_terms(fr, weights.beta_min)
        grads = _backward(params, cache_d, d_data)
        g_reg = _backward(params, cache_r, lam_m * d_min, lam_e * dgrad)
        for k in grads:
            grads[k] += g_reg[k]

    total = l_on + l_off + lam_e * l_eik + lam_m * l_min
    terms = {"total": total, "on": l_on, "off": l_off, "eik": l_eik, "min": l_min, **counts}
    if not math.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss: {terms}", terms)
    return total, grads, terms


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: FieldParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(params.tensors[k]) for k in LEARNED},
            {k: np.zeros_like(params.tensors[k]) for k in LEARNED},
        )


def adam_step(
    params: FieldParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam with decoupled weight decay on MLP weights, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    updates = {}
    for k in LEARNED:
        g = grads[k]
        if g.shape != params.tensors[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and k in MLP_WEIGHTS:
            step = step + weight_decay * params.tensors[k]
        step *= lr
        if not np.all(np.isfinite(step)):
            raise NonFiniteLossError(f"non-finite Adam update for {k}")
        updates[k] = step
    for k, step in updates.items():
        params.tensors[k] -= step.astype(params.tensors[k].dtype, copy=False)


# --- loop -----------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = dfield(default_factory=list)
    rebuilds: list[dict] = dfield(default_factory=list)
    warnings: list[str] = dfield(default_factory=list)
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write("".join(f"# {line}\n" for line in comment.splitlines()))
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in LOG_COLUMNS])


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [{k: (int(v) if k in ("epoch", "iter") else float(v)) for k, v in r.items()} for r in rows]


def check_normalized(sections: CrossSectionSet, tol: float = 1e-9) -> None:
    pts = sections.world_vertices()
    if len(pts) == 0:
        raise ValueError("no contours")
    if np.abs(pts).max() > NORMALIZED_HALF_EXTENT + tol:
        raise ValueError("sections must be normalized (see normalize_scene)")


def train(
    sections: CrossSectionSet,
    config: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[int, FieldParams, dict], None] | None = None,
) -> tuple[FieldParams, TrainLog]:
    """Fit the field to normalized cross-sections; returns params and the log."""
    check_normalized(sections)
    start = time.perf_counter()
    params = init_params(config.field, config.seed)
    params = geometric_init(params, config.init_radius, config.seed)
    params.normalization = sections.normalization
    state = AdamState.zeros_like(params)
    log = TrainLog()
    schedule = config.schedule
    bank: SampleBank | None = None
    it = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        if epoch in schedule.relabel_epochs:
            stage = schedule.relabel_epochs.index(epoch)
            bank = build_sample_bank(sections, schedule, stage, config.seed, config.threads)
            log.rebuilds.append({"epoch": epoch, "stage": stage, "epsilon": bank.epsilon, "size": len(bank)})
            log.warnings.extend(bank.warnings)
            logger.info("epoch %d: sample bank stage %d (eps=%g, %d samples)", epoch, stage, bank.epsilon, len(bank))
        assert bank is not None
        order = np.random.default_rng([config.seed, epoch, 0xE90C]).permutation(len(bank))
        n_iter = math.ceil(len(bank) / config.batch)
        sums = dict.fromkeys(("total", "on", "off", "eik", "min"), 0.0)
        n_off = n_cand = 0
        for b in range(n_iter):
            sel = order[b * config.batch : (b + 1) * config.batch]
            reg = sample_regularization_batch(config.reg_count, config.seed, it)
            try:
                _, grads, terms = total_loss_and_grads(
                    bank.x[sel], bank.f2d[sel], bank.tag[sel], reg, params, config.weights, config.grad_mode, config.data_loss
                )
                adam_step(
                    params,
                    grads,
                    state,
                    lr,
                    config.weight_decay,
                    config.adam_beta1,
                    config.adam_beta2,
                    config.adam_eps,
                )
            except NonFiniteLossError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(params, checkpoint_path)
                    exc.checkpoint = str(checkpoint_path)
                exc.last_good = params
                raise
            it += 1
            for k in sums:
                sums[k] += terms[k]
            n_off += terms["n_off"]
            n_cand += terms["n_candidates"]
        row = {
            "epoch": epoch,
            "iter": it,
            "loss_total": sums["total"] / n_iter,
            "loss_on": sums["on"] / n_iter,
            "loss_off": sums["off"] / n_iter,
            "loss_eik": sums["eik"] / n_iter,
            "loss_min": sums["min"] / n_iter,
            "off_fraction": n_off / n_cand if n_cand else 0.0,
            "lr": lr,
        }
        log.rows.append(row)
        logger.info(
            "epoch %d: loss %.5g (on %.4g off %.4g eik %.4g min %.4g) off %.4f lr %.3g",
            epoch,
            row["loss_total"],
            row["loss_on"],
            row["loss_off"],
            row["loss_eik"],
            row["loss_min"],
            row["off_fraction"],
            lr,
        )
        if on_epoch is not None:
            on_epoch(epoch, params, row)
    log.seconds = time.perf_counter() - start
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    if log_path is not None:
        notes = [f"seed={config.seed}"]
        notes += [f"rebuild epoch={r['epoch']} epsilon={r['epsilon']!r} size={r['size']}" for r in log.rebuilds]
        log.write_csv(log_path, comment="\n".join(notes))
    return params, log
