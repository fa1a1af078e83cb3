"""Conditional flow matching training over any variant of the grid.

One training step draws data, drops conditioning per encoder, draws ``t`` from
the variant's density and ``eps`` from N(0, I), regresses the network onto the
variant's target and applies a decoupled-weight-decay Adam update.

EMA cadence: the reference protocol updates with decay 0.99 every 100 steps.
By default we update every step with ``decay ** (1 / ema_every)``, which has the
same time constant; ``ema_per_step=False`` reproduces the sparse cadence.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .mmdit import ConditioningInputs, ModelConfig, init_params, model_forward
from .sample import ShiftedDensity, edm_input_scale
from .trajectories import RF_TRAIN_CLAMP, from_x0_eps
from .variants import VariantSpec, parse_variant


class TrainingFault(FloatingPointError):
    pass


class RegistryMismatch(KeyError):
    pass


# datasets -----------------------------------------------------------------------


class DatasetKind(str, enum.Enum):
    CHECKERBOARD = "checkerboard2d"
    GAUSSMIX = "gaussmix2d"
    SHAPES = "shapes"


# generator constants
GAUSSMIX_RADIUS = 1.4
GAUSSMIX_STD = 0.15
CHECKER_CELL = 0.75  # 4 x 4 board on [-1.5, 1.5]^2, 8 dark cells = 8 classes
SHAPES_SIDE = 16
SHAPES_JITTER = 2  # center offset in pixels, uniform on {-2..2}
SHAPES_SIZE = (4, 6)  # half-extent in pixels, uniform on [4, 6)
SHAPE_NAMES = ("circle", "square", "triangle")


def _shape_mask(kind: int, cy: float, cx: float, r: float, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy * dy + dx * dx <= r * r
    if kind == 1:
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    # upright isosceles triangle with apex at the top
    inside_y = (dy >= -r) & (dy <= r)
    half_w = (dy + r) / 2.0
    return inside_y & (np.abs(dx) <= half_w)


@dataclass(frozen=True)
class ToyDataset:
    """Class-conditional toy data; captions are token sequences built from the class id.

    Token ``0`` is reserved; class ``c`` is token ``c + 1`` and a shared
    dataset token fills the remaining caption positions.
    """

    kind: DatasetKind = DatasetKind.GAUSSMIX
    caption_len: int = 1

    @property
    def n_classes(self) -> int:
        return 3 if self.kind is DatasetKind.SHAPES else 8

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (SHAPES_SIDE, SHAPES_SIDE, 1) if self.kind is DatasetKind.SHAPES else (1, 1, 2)

    @property
    def vocab(self) -> int:
        return self.n_classes + 2

    def class_centers(self) -> np.ndarray:
        if self.kind is DatasetKind.GAUSSMIX:
            ang = 2 * np.pi * np.arange(8) / 8
            return GAUSSMIX_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        if self.kind is DatasetKind.CHECKERBOARD:
            cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
            return np.array([((j + 0.5) * CHECKER_CELL - 1.5, (i + 0.5) * CHECKER_CELL - 1.5) for i, j in cells])
        raise ValueError("image data has no point centers")

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, self.n_classes, size=n)
        return self.sample_classes(labels, rng), labels

    def sample_classes(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(labels)
        if self.kind is DatasetKind.GAUSSMIX:
            pts = self.class_centers()[labels] + GAUSSMIX_STD * rng.normal(size=(n, 2))
            return pts.reshape(n, 1, 1, 2)
        if self.kind is DatasetKind.CHECKERBOARD:
            pts = self.class_centers()[labels] + CHECKER_CELL * (rng.random((n, 2)) - 0.5)
            return pts.reshape(n, 1, 1, 2)
        out = np.empty((n, SHAPES_SIDE, SHAPES_SIDE, 1))
        for i, c in enumerate(labels):
            off = rng.integers(-SHAPES_JITTER, SHAPES_JITTER + 1, size=2)
            r = rng.uniform(*SHAPES_SIZE)
            mask = _shape_mask(int(c), SHAPES_SIDE / 2 + off[0], SHAPES_SIDE / 2 + off[1], r, SHAPES_SIDE)
            out[i, :, :, 0] = np.where(mask, 1.0, -1.0)
        return out

    def captions(self, labels: np.ndarray) -> np.ndarray:
        tok = np.full((len(labels), self.caption_len), self.n_classes + 1, dtype=np.int64)
        tok[:, 0] = np.asarray(labels) + 1
        return tok

    def labels_from_tokens(self, tokens: np.ndarray) -> np.ndarray:
        return np.asarray(tokens)[:, 0] - 1


def make_dataset(name: str, caption_len: int = 1) -> ToyDataset:
    try:
        kind = DatasetKind(name.lower())
    except ValueError:
        raise ValueError(f"unknown dataset {name!r}; choose from {[k.value for k in DatasetKind]}") from None
    return ToyDataset(kind, caption_len)


def model_config_for(dataset: ToyDataset, depth: int = 2, n_encoders: int = 2, **overrides) -> ModelConfig:
    h, w, c = dataset.latent_shape
    if dataset.kind is DatasetKind.SHAPES:
        base = dict(patch=2, pos_S=128, pos_H_max=128, pos_W_max=128)
    else:
        base = dict(patch=1, pos_S=16, pos_H_max=16, pos_W_max=16)
    base.update(
        depth=depth,
        latent_hw=(h, w),
        latent_channels=c,
        vocab=dataset.vocab,
        caption_len=dataset.caption_len,
        n_encoders=n_encoders,
    )
    base.update(overrides)
    return ModelConfig(**base)


# config --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults: batch 128, lr 1e-4, warmup 1000 (batch scaled down from 1024)."""

    variant: str = "rf/lognorm(0.00,1.00)"
    dataset: str = "gaussmix2d"
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-4
    warmup: int = 1000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.99
    ema_every: int = 100
    ema_per_step: bool = True
    cfg_drop: float = 0.464
    shift: float = 1.0
    seed: int = 0
    val_every: int = 500
    val_size: int = 256
    val_levels: int = 8
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=lambda: model_config_for(ToyDataset()))

    def __post_init__(self):
        if not 0.0 <= self.cfg_drop <= 1.0:
            raise ValueError(f"cfg_drop must lie in [0, 1], got {self.cfg_drop}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.warmup < 0 or self.steps < 0 or self.batch < 1 or self.ema_every < 1:
            raise ValueError("warmup and steps must be >= 0; batch and ema_every >= 1")
        if self.val_levels < 2:
            raise ValueError("val_levels must be >= 2")
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    @property
    def spec(self) -> VariantSpec:
        return parse_variant(self.variant)

    def to_json(self) -> str:
        d = asdict(self)
        d["model"] = json.loads(self.model.to_json())
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_json(json.dumps(d["model"]))
        else:
            ds = make_dataset(d.get("dataset", "gaussmix2d"))
            d["model"] = model_config_for(ds)
        return cls(**d)


# loss ------------------------------------------------------------------------------


def _density(spec: VariantSpec, shift: float):
    return spec.density if shift == 1.0 else ShiftedDensity(spec.density, shift)


def draw_training_times(spec: VariantSpec, rng: np.random.Generator, n: int, shift: float = 1.0) -> np.ndarray:
    t = np.asarray(_density(spec, shift).sample(rng, n), dtype=np.float64)
    return np.clip(t, RF_TRAIN_CLAMP, 1.0 - RF_TRAIN_CLAMP)


def network_model(params: T.Params, config: ModelConfig):
    """Adapter ``(z_in, t, cond) -> Tensor`` around the MM-DiT."""

    def model(z_in, t, cond):
        return model_forward(z_in.astype(T.DTYPES[config.dtype]), t, cond, params, config)

    return model


def cfm_terms(x0, cond, spec: VariantSpec, model, t, eps):
    """Prediction tensor and target array for fixed ``t`` and ``eps``."""
    sched = spec.schedule
    tt = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    z = sched.a(tt) * x0 + sched.b(tt) * eps
    z_in = edm_input_scale(spec, tt) * z
    pred = model(z_in, t, cond)
    target = from_x0_eps(x0, eps, spec.parameterization, z, t, sched)
    return pred, np.asarray(target, dtype=pred.data.dtype if isinstance(pred, T.Tensor) else np.float64)


def cfm_loss(x0, cond, spec: VariantSpec, model, rng: np.random.Generator, t=None, eps=None, shift: float = 1.0, step: int | None = None):
    """Mean squared error between the model output and the variant's regression target.

    ``t`` and ``eps`` default to fresh draws from the variant's density and N(0, I).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if t is None:
        t = draw_training_times(spec, rng, x0.shape[0], shift)
    if eps is None:
        eps = rng.normal(size=x0.shape)
    pred, target = cfm_terms(x0, cond, spec, model, np.asarray(t, dtype=np.float64), eps)
    loss = T.mse(pred, target)
    if not np.isfinite(loss.data):
        where = f" at step {step}" if step is not None else ""
        raise TrainingFault(f"non-finite loss{where} (variant {spec.label})")
    return loss


def cfm_per_sample(x0, cond, spec: VariantSpec, model, t, eps) -> np.ndarray:
    """Per-sample squared errors without building a graph."""
    pred, target = cfm_terms(np.asarray(x0, dtype=np.float64), cond, spec, model, np.asarray(t, dtype=np.float64), eps)
    p = pred.data if isinstance(pred, T.Tensor) else np.asarray(pred)
    d = (p.astype(np.float64) - target).reshape(len(x0), -1)
    return (d * d).mean(axis=1)


# optimizer ----------------------------------------------------------------------------


def lr_at(step: int, lr: float, warmup: int) -> float:
    """Linear warmup: 0 at step 0, full at ``step >= warmup``."""
    if warmup == 0:
        return lr
    return lr * min(1.0, step / warmup)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: T.Params) -> AdamState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_update(params: T.Params, grads: dict[str, np.ndarray], state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """In-place AdamW step; the update is ``lr * m_hat / (sqrt(v_hat) + eps)`` plus decoupled decay."""
    state.t += 1
    c1, c2 = 1.0 - beta1**state.t, 1.0 - beta2**state.t
    inv_sqrt_c2, step = 1.0 / math.sqrt(c2), lr / c1
    for name, p in params.items():
        g, m, v = grads[name], state.m[name], state.v[name]
        buf = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - beta2
        v *= beta2
        v += buf
        np.sqrt(v, out=buf)
        buf *= inv_sqrt_c2
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= step
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= buf


def ema_update(ema: T.Params, params: T.Params, decay: float) -> T.Params:
    if list(ema) != list(params):
        missing = set(params) ^ set(ema)
        raise RegistryMismatch(f"EMA registry does not match parameters: {sorted(missing)[:5]}")
    for k, p in params.items():
        e = ema[k].data
        e *= decay
        e += (1.0 - decay) * p.data
    return ema


def cfg_dropout(cond: ConditioningInputs, p: float, rng: np.random.Generator, n_sources: int | None = None) -> ConditioningInputs:
    """Drop each conditioning source independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    keep = cond.keep_mask(n_sources) if n_sources else cond.keep
    draw = rng.random(keep.shape) >= p
    return ConditioningInputs(cond.tokens, keep & draw)


# validation --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationResult:
    t_levels: np.ndarray
    losses: np.ndarray
    aggregate: float


def validation_levels(levels: int) -> np.ndarray:
    return np.arange(1, levels + 1) / (levels + 1.0)


def stratified_validation_loss(per_sample_loss, x0, cond, levels: int = 8, seed: int = 0) -> ValidationResult:
    """Loss at equispaced ``t`` levels with one seeded noise stream per level.

    ``per_sample_loss(x0, cond, t, eps)`` returns per-sample losses. The aggregate
    is the mean over all levels except the last (highest ``t``).
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("validation set is empty")
    ts = validation_levels(levels)
    out = np.empty(levels)
    for k, tk in enumerate(ts):
        eps = np.random.default_rng([seed, k]).normal(size=x0.shape)
        out[k] = float(np.mean(per_sample_loss(x0, cond, np.full(x0.shape[0], tk), eps)))
    return ValidationResult(ts, out, float(out[:-1].mean()))


# training loop ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: T.Params
    ema: T.Params
    opt: AdamState
    step: int
    rng: np.random.Generator

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            out[f"param/{k}"] = p.data
        for k, p in self.ema.items():
            out[f"ema/{k}"] = p.data
        for k in self.params:
            out[f"adam_m/{k}"] = self.opt.m[k]
            out[f"adam_v/{k}"] = self.opt.v[k]
        return out


def init_state(config: TrainConfig) -> TrainState:
    params = init_params(config.model, seed=config.seed)
    return TrainState(params, params.clone(), AdamState.zeros_like(params), 0, np.random.default_rng(config.seed))


def save_state(path, state: TrainState, config: TrainConfig, extra: dict | None = None) -> None:
    meta = {
        "step": state.step,
        "adam_t": state.opt.t,
        "rng": state.rng.bit_generator.state,
        "config": json.loads(config.to_json()),
    }
    meta.update(extra or {})
    T.save_checkpoint(path, state.checkpoint_arrays(), meta)


def load_state(path) -> tuple[TrainState, TrainConfig, dict]:
    arrays, meta = T.load_checkpoint(path)
    config = TrainConfig.from_json(json.dumps(meta["config"]))
    names = [k[len("param/") :] for k in arrays if k.startswith("param/")]
    params = T.params_from_arrays({k: arrays[f"param/{k}"] for k in names}, names)
    ema = T.params_from_arrays({k: arrays[f"ema/{k}"] for k in names}, names)
    opt = AdamState({k: arrays[f"adam_m/{k}"].copy() for k in names}, {k: arrays[f"adam_v/{k}"].copy() for k in names}, meta["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params, ema, opt, meta["step"], rng), config, meta


def load_ema(path) -> tuple[T.Params, T.Params, TrainConfig]:
    """(raw params, EMA params, config) from a training checkpoint."""
    state, config, _ = load_state(path)
    return state.params, state.ema, config


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def train_step(state: TrainState, config: TrainConfig, spec: VariantSpec, dataset: ToyDataset) -> dict:
    rng = state.rng
    x0, labels = dataset.sample(config.batch, rng)
    cond = ConditioningInputs(dataset.captions(labels), np.ones((config.batch, config.model.n_encoders), dtype=bool))
    cond = cfg_dropout(cond, config.cfg_drop, rng)
    loss = cfm_loss(x0, cond, spec, network_model(state.params, config.model), rng, shift=config.shift, step=state.step)
    grads = T.backward(loss, state.params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient in parameter {name!r} at step {state.step}")
    lr = lr_at(state.step, config.lr, config.warmup)
    adamw_update(state.params, grads, state.opt, lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    T.zero_grad(state.params)
    state.step += 1
    if config.ema_per_step:
        ema_update(state.ema, state.params, config.ema_decay ** (1.0 / config.ema_every))
    elif state.step % config.ema_every == 0:
        ema_update(state.ema, state.params, config.ema_decay)
    return {"step": state.step, "loss": float(loss.data), "grad_norm": _grad_norm(grads), "lr": lr}


def validation_set(config: TrainConfig, dataset: ToyDataset):
    rng = np.random.default_rng([config.seed, 7919])
    x0, labels = dataset.sample(config.val_size, rng)
    cond = ConditioningInputs(dataset.captions(labels), np.ones((config.val_size, config.model.n_encoders), dtype=bool))
    return x0, cond


def validate(params: T.Params, config: TrainConfig, spec: VariantSpec, x0, cond) -> ValidationResult:
    model = network_model(params, config.model)

    def per_sample(x, c, t, eps):
        return cfm_per_sample(x, c, spec, model, t, eps)

    return stratified_validation_loss(per_sample, x0, cond, config.val_levels, seed=config.seed)


def metrics_header(levels: int) -> list[str]:
    return ["step", "loss", "grad_norm", "lr"] + [f"val_{k}" for k in range(levels)] + ["val_agg"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class MetricsWriter:
    """Append-only CSV; on resume, rows at or beyond the resume step are dropped first."""

    def __init__(self, path, levels: int, resume_step: int | None = None, preamble: str | None = None):
        self.path, self.levels = path, levels
        if resume_step is not None and os.path.exists(path):
            with open(path, newline="") as fh:
                lines = fh.read().splitlines(keepends=True)
            comments = [ln for ln in lines if ln.startswith("#")]
            kept = [ln for ln in lines if not ln.startswith("#") and (ln.startswith("step") or int(ln.split(",", 1)[0]) <= resume_step)]
            with open(path, "w", newline="") as fh:
                fh.write(preamble if preamble else "".join(comments))
                fh.writelines(kept)
        else:
            with open(path, "w", newline="") as fh:
                if preamble:
                    fh.write(preamble)
                csv.writer(fh, lineterminator="\n").writerow(metrics_header(levels))

    def write(self, row: dict, val: ValidationResult | None) -> None:
        vals = [None] * (self.levels + 1) if val is None else list(val.losses) + [val.aggregate]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [row["step"], _fmt(row["loss"]), _fmt(row["grad_norm"]), _fmt(row["lr"])] + [_fmt(v) for v in vals]
            )


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    validation: list[tuple[int, ValidationResult]]


def train(
    config: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
    resume_from=None,
    progress=None,
    csv_preamble: str | None = None,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Run (or resume) training for ``config.steps`` steps."""
    spec = config.spec
    dataset = make_dataset(config.dataset, config.model.caption_len)
    if resume_from is not None:
        state, saved, _ = load_state(resume_from)
        if replace(saved, steps=config.steps) != config:
            raise ValueError("resume checkpoint was written with a different configuration")
    else:
        state = init_state(config)
    writer = MetricsWriter(metrics_path, config.val_levels, state.step if resume_from else None, csv_preamble) if metrics_path else None
    vx, vc = validation_set(config, dataset)
    history, vals = [], []
    while state.step < config.steps:
        row = train_step(state, config, spec, dataset)
        history.append(row)
        val = None
        if (config.val_every and state.step % config.val_every == 0) or state.step == config.steps:
            val = validate(state.params, config, spec, vx, vc)
            vals.append((state.step, val))
        if writer:
            writer.write(row, val)
        if checkpoint_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_state(checkpoint_path, state, config, checkpoint_meta)
        if progress:
            progress(row, val)
    if checkpoint_path:
        save_state(checkpoint_path, state, config, checkpoint_meta)
    return TrainResult(state, history, vals)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))
