"""Variant comparison: metric records, Pareto peeling, rank averaging and the desk-scale study.

Objectives are oriented as (higher-better ``objective_a``, lower-better
``objective_b``). At desk scale ``objective_a`` is conditional fidelity and
``objective_b`` the exact 2-Wasserstein distance to a reference set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .variants import GRID_NOTE, VariantSpec, parse_variant, variant_grid  # noqa: F401  (re-exported)

W2_MAX_N = 512
MIN_SAMPLES = 64


class SizeError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Control:
    dataset: str
    ema: bool
    steps: int
    guidance: float

    @property
    def setting_id(self) -> str:
        return f"s{self.steps}_g{self.guidance:g}"

    def label(self) -> str:
        return f"{self.dataset}/{'ema' if self.ema else 'raw'}/{self.setting_id}"


@dataclass(frozen=True)
class MetricRecord:
    variant: str
    control: Control
    objective_a: float
    objective_b: float

    def __post_init__(self):
        if not (math.isfinite(self.objective_a) and math.isfinite(self.objective_b)):
            raise ValueError(f"non-finite objectives for {self.variant} @ {self.control}")


def dominates(p, q) -> bool:
    """``p`` weakly better in both objectives and strictly better in one."""
    return p.objective_a >= q.objective_a and p.objective_b <= q.objective_b and (
        p.objective_a > q.objective_a or p.objective_b < q.objective_b
    )


def pareto_front(records: list) -> list:
    return [r for r in records if not any(dominates(o, r) for o in records if o is not r)]


def non_dominated_sort(records: list) -> list[int]:
    """1-based front index per record (domination counting, fronts peeled in order)."""
    n = len(records)
    if n == 0:
        return []
    a = np.array([r.objective_a for r in records], dtype=np.float64)
    b = np.array([r.objective_b for r in records], dtype=np.float64)
    # dom[i, j]: i dominates j
    dom = (a[:, None] >= a[None, :]) & (b[:, None] <= b[None, :]) & ((a[:, None] > a[None, :]) | (b[:, None] < b[None, :]))
    count = dom.sum(axis=0)
    ranks = np.zeros(n, dtype=int)
    front = np.flatnonzero(count == 0)
    level = 1
    while front.size:
        ranks[front] = level
        count = count - dom[front].sum(axis=0)
        count[ranks > 0] = -1
        front = np.flatnonzero(count == 0)
        level += 1
    return ranks.tolist()


def rank_cells(records: list[MetricRecord]) -> dict[tuple[str, Control], int]:
    """Non-dominated rank of every variant within each control cell."""
    by_cell: dict[Control, list[MetricRecord]] = {}
    for r in records:
        by_cell.setdefault(r.control, []).append(r)
    out = {}
    for control, recs in by_cell.items():
        for r, k in zip(recs, non_dominated_sort(recs)):
            out[(r.variant, control)] = k
    return out


@dataclass(frozen=True)
class RankRow:
    variant: str
    rank_all: float
    rank_5: float | None
    rank_50: float | None
    cells: int
    completeness: float


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def average_rank(ranks: dict[tuple[str, Control], int], expected_cells: int | None = None) -> list[RankRow]:
    """Mean rank per variant over its populated cells, plus 5-step and 50-step sub-averages."""
    per: dict[str, list[tuple[Control, int]]] = {}
    for (variant, control), k in ranks.items():
        per.setdefault(variant, []).append((control, k))
    if not per:
        raise ValueError("average_rank: no ranked cells")
    total = expected_cells or max(len(v) for v in per.values())
    rows = []
    for variant, cells in per.items():
        ks = [k for _, k in cells]
        rows.append(
            RankRow(
                variant,
                float(np.mean(ks)),
                _mean([k for c, k in cells if c.steps == 5]),
                _mean([k for c, k in cells if c.steps == 50]),
                len(cells),
                len(cells) / total,
            )
        )
    return sorted(rows, key=lambda r: (r.rank_all, r.variant))


# metrics ---------------------------------------------------------------------------------


def w2_exact(x, y) -> float:
    """Exact 2-Wasserstein distance between equal-size empirical measures via optimal assignment."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if len(x) != len(y):
        raise SizeError(f"w2_exact needs equal set sizes, got {len(x)} and {len(y)}")
    if len(x) > W2_MAX_N:
        raise SizeError(f"exact assignment limited to n <= {W2_MAX_N}, got {len(x)}; subsample first")
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def conditional_fidelity(samples, labels, reference, reference_labels) -> float:
    """Fraction of samples whose nearest reference point carries the same class."""
    s = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    r = np.asarray(reference, dtype=np.float64).reshape(len(reference), -1)
    d = ((s[:, None, :] - r[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.asarray(reference_labels)[np.argmin(d, axis=1)]
    return float(np.mean(nearest == np.asarray(labels)))


def toy_metrics(samples, labels, reference, reference_labels) -> tuple[float, float]:
    """(fidelity, W2): the higher-better and lower-better desk-scale objectives."""
    if len(samples) < MIN_SAMPLES:
        raise SizeError(f"toy_metrics needs at least {MIN_SAMPLES} samples, got {len(samples)}")
    if len(samples) > W2_MAX_N:
        raise SizeError(f"toy_metrics: {len(samples)} samples exceed exact-assignment limit {W2_MAX_N}; subsample first")
    return conditional_fidelity(samples, labels, reference, reference_labels), w2_exact(samples, reference)


# reports ------------------------------------------------------------------------------------


def _f(x) -> str:
    return "" if x is None else f"{x:.4f}"


def write_rank_csv(rows: list[RankRow], path, preamble: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble)
        fh.write(f"# grid: {GRID_NOTE}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "rank_all", "rank_5_steps", "rank_50_steps", "cells", "completeness"])
        for r in rows:
            w.writerow([r.variant, _f(r.rank_all), _f(r.rank_5), _f(r.rank_50), r.cells, f"{r.completeness:.3f}"])


def format_rank_table(rows: list[RankRow]) -> str:
    width = max([len("variant")] + [len(r.variant) for r in rows])
    lines = [f"{'variant':<{width}}  {'all':>6}  {'5 steps':>8}  {'50 steps':>8}  {'complete':>8}"]
    for r in rows:
        lines.append(
            f"{r.variant:<{width}}  {r.rank_all:6.2f}  {_f(r.rank_5):>8}  {_f(r.rank_50):>8}  {r.completeness:8.2f}"
        )
    return "\n".join(lines)


def write_records_csv(records: list[MetricRecord], path, ranks=None, preamble: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "dataset", "ema", "steps", "guidance", "fidelity", "w2", "rank"])
        for r in records:
            c = r.control
            k = "" if ranks is None else ranks.get((r.variant, c), "")
            w.writerow([r.variant, c.dataset, int(c.ema), c.steps, c.guidance, repr(r.objective_a), repr(r.objective_b), k])


def scatter_svg(records: list[MetricRecord], title: str = "", width: int = 480, height: int = 360, preamble: str = "") -> str:
    """Objective scatter with the first front highlighted."""
    if not records:
        raise ValueError("scatter_svg: no records")
    front = {id(r) for r in pareto_front(records)}
    xs = np.array([r.objective_b for r in records])
    ys = np.array([r.objective_a for r in records])
    pad = 40

    def scale(v, lo, hi, a, b):
        return a + (b - a) * (0.5 if hi == lo else (v - lo) / (hi - lo))

    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
    ]
    if preamble:
        parts.append(f"<!-- {preamble.strip()} -->")
    parts += [
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">W2 (lower is better) [{x0:.3f}, {x1:.3f}]</text>',
        f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" text-anchor="middle">fidelity [{y0:.3f}, {y1:.3f}]</text>',
    ]
    for r, x, y in zip(records, xs, ys):
        cx = scale(x, x0, x1, pad + 8, width - pad - 8)
        cy = scale(y, y0, y1, height - pad - 8, pad + 8)
        on = id(r) in front
        parts.append(
            f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{5 if on else 3}" fill="{"#c0392b" if on else "#7f8c8d"}">'
            f"<title>{r.variant} {r.control.label()}</title></circle>"
        )
        if on:
            parts.append(f'<text x="{cx + 6:.2f}" y="{cy - 6:.2f}" font-size="9">{r.variant}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# the desk-scale study -------------------------------------------------------------------------

SAMPLER_SETTINGS = ((50, 1.0), (50, 2.5), (50, 5.0), (5, 5.0), (10, 5.0), (25, 5.0))
DATASETS = ("gaussmix2d", "checkerboard2d")


def planned_cells(variants: list[str], datasets=DATASETS, emas=(True, False), settings=SAMPLER_SETTINGS) -> list[tuple[str, Control]]:
    return [(v, Control(d, e, s, g)) for v in variants for d in datasets for e in emas for s, g in settings]


@dataclass(frozen=True)
class StudyConfig:
    """Micro-study protocol: train every variant per dataset and seed, then score every control cell."""

    variants: tuple[str, ...] = (
        "rf",
        "edm(-1.20,1.20)",
        "eps/linear",
        "v/cos",
        "v/linear",
        "rf/lognorm(0.00,1.00)",
    )
    datasets: tuple[str, ...] = ("gaussmix2d",)
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    warmup: int = 100
    depth: int = 1
    ema_decay: float = 0.99
    ema_every: int = 1
    n_eval: int = 512
    settings: tuple[tuple[int, float], ...] = SAMPLER_SETTINGS
    emas: tuple[bool, ...] = (True, False)
    # EMA-only diagnostic cells scored for W2 but kept out of the ranking
    diagnostics: tuple[tuple[int, float], ...] = ((5, 1.0),)

    def train_config(self, variant: str, dataset: str, seed: int):
        from .train import TrainConfig, make_dataset, model_config_for

        ds = make_dataset(dataset)
        return TrainConfig(
            variant=variant,
            dataset=dataset,
            steps=self.steps,
            batch=self.batch,
            lr=self.lr,
            warmup=self.warmup,
            ema_decay=self.ema_decay,
            ema_every=self.ema_every,
            seed=seed,
            val_every=0,
            model=model_config_for(ds, depth=self.depth),
        )


@dataclass
class StudyResult:
    records: dict[int, list[MetricRecord]] = field(default_factory=dict)
    path_ratio: dict[tuple[int, str, str], float] = field(default_factory=dict)
    w2: dict[tuple[int, str, str, bool, int, float], float] = field(default_factory=dict)

    def rows(self, seed: int) -> list[RankRow]:
        return average_rank(rank_cells(self.records[seed]))


def evaluation_set(dataset: str, n: int, seed: int):
    """Balanced labels, shared noise and a reference set; identical across variants (common random numbers)."""
    from .train import make_dataset

    ds = make_dataset(dataset)
    labels = np.arange(n) % ds.n_classes
    rng = np.random.default_rng([seed, 4242])
    noise = rng.normal(size=(n,) + ds.latent_shape)
    reference = ds.sample_classes(labels, np.random.default_rng([seed, 31337]))
    return ds, labels, noise, reference


def evaluate_checkpoint(variant: str, params, ema, model_config, dataset: str, seed: int, n: int, settings, emas, diagnostics=()):
    """Metric records for one trained variant, and its straightness ratio at 50 steps, guidance 1."""
    from .mmdit import ConditioningInputs
    from .sample import SamplerConfig, endpoint_distance, sample_variant, path_length

    spec = parse_variant(variant)
    ds, labels, noise, reference = evaluation_set(dataset, n, seed)
    cond = ConditioningInputs(ds.captions(labels), np.ones((n, model_config.n_encoders), dtype=bool))
    records, w2s, ratio = [], {}, None
    for use_ema in emas:
        weights = ema if use_ema else params
        for steps, g in settings:
            sc = SamplerConfig(steps=steps, guidance=g)
            want_traj = use_ema and steps == 50 and g == 1.0
            out = sample_variant(spec, weights, model_config, cond, noise, sc, return_trajectory=want_traj)
            if want_traj:
                out, traj = out
                ratio = path_length(traj) / endpoint_distance(traj)
            fid, w2 = toy_metrics(out.reshape(n, -1), labels, reference.reshape(n, -1), labels)
            records.append(MetricRecord(variant, Control(dataset, use_ema, steps, g), fid, w2))
            w2s[(use_ema, steps, g)] = w2
    for steps, g in diagnostics:
        if (True, steps, g) not in w2s:
            out = sample_variant(spec, ema, model_config, cond, noise, SamplerConfig(steps=steps, guidance=g))
            w2s[(True, steps, g)] = w2_exact(out.reshape(n, -1), reference.reshape(n, -1))
    return records, w2s, ratio


def run_study(config: StudyConfig, progress=None, checkpoint_dir=None) -> StudyResult:
    from .train import train

    result = StudyResult()
    for seed in config.seeds:
        recs = []
        for dataset in config.datasets:
            for variant in config.variants:
                tc = config.train_config(variant, dataset, seed)
                ck = None
                if checkpoint_dir is not None:
                    safe = variant.replace("/", "_").replace("(", "_").replace(")", "").replace(",", "_")
                    ck = f"{checkpoint_dir}/{dataset}_{safe}_seed{seed}.ckpt"
                res = train(tc, checkpoint_path=ck)
                r, w2s, ratio = evaluate_checkpoint(
                    variant, res.state.params, res.state.ema, tc.model, dataset, seed, config.n_eval, config.settings, config.emas,
                    config.diagnostics,
                )
                recs.extend(r)
                for (e, s, g), v in w2s.items():
                    result.w2[(seed, dataset, variant, e, s, g)] = v
                if ratio is not None:
                    result.path_ratio[(seed, dataset, variant)] = ratio
                if progress:
                    progress(seed, dataset, variant, r, ratio)
        result.records[seed] = recs
    return result


def relative_degradation(result: StudyResult, seed: int, dataset: str, variant: str, few: int = 5, many: int = 50, guidance: float = 1.0, ema: bool = True) -> float:
    """``(W2 at few steps - W2 at many steps) / W2 at many steps``."""
    w_few = result.w2[(seed, dataset, variant, ema, few, guidance)]
    w_many = result.w2[(seed, dataset, variant, ema, many, guidance)]
    return (w_few - w_many) / w_many
