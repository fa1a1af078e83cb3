"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical fault, 4 I/O error.
``FLOWLAB_SEED`` overrides the configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# manifest ----------------------------------------------------------------------------


def content_hash(text: str) -> str:
    """git blob hash of ``text``."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    out_dir: str
    config_hash: str
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def preamble(self) -> str:
        return f"# flowlab manifest {self.config_hash}\n"

    def record(self, path) -> None:
        p = Path(path)
        self.artifacts[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()

    def write(self) -> Path:
        d = dataclasses.asdict(self)
        d["created"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path


def _manifest(command: str, config_text: str, args, seed) -> RunManifest:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(command, getattr(args, "config", None), seed, str(out), content_hash(config_text))


def _env_seed(default):
    raw = os.environ.get("FLOWLAB_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"FLOWLAB_SEED must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# commands ----------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .train import TrainConfig, load_state, make_dataset, model_config_for, train

    if args.resume:
        _, cfg, _ = load_state(args.resume)
    elif args.config:
        raw = _read_json(args.config)
        raw.pop("manifest", None)  # written by a previous run's config.json
        cfg = TrainConfig.from_json(json.dumps(raw))
    else:
        cfg = TrainConfig()
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.dataset:
        overrides["dataset"] = args.dataset
        overrides["model"] = model_config_for(make_dataset(args.dataset), depth=cfg.model.depth)
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.depth is not None:
        base = make_dataset(overrides.get("dataset", cfg.dataset), cfg.model.caption_len)
        overrides["model"] = model_config_for(base, depth=args.depth)
    seed = _env_seed(args.seed if args.seed is not None else cfg.seed)
    overrides["seed"] = seed
    cfg = dataclasses.replace(cfg, **overrides)
    _ = cfg.spec  # validate the label before any work
    m = _manifest("train", cfg.to_json(), args, seed)
    out = Path(args.out)
    stamped = {"manifest": m.config_hash, **json.loads(cfg.to_json())}
    (out / "config.json").write_text(json.dumps(stamped, indent=2, sort_keys=True) + "\n")
    metrics, ckpt = out / "metrics.csv", out / "checkpoint.flk"

    def progress(row, val):
        if not args.quiet and (row["step"] % max(1, cfg.steps // 10) == 0 or val is not None):
            extra = f" val_agg={val.aggregate:.5f}" if val is not None else ""
            print(f"step {row['step']:>6} loss={row['loss']:.5f} lr={row['lr']:.2e}{extra}", flush=True)

    train(
        cfg,
        metrics_path=metrics,
        checkpoint_path=ckpt,
        resume_from=args.resume,
        progress=progress,
        csv_preamble=m.preamble,
        checkpoint_meta={"manifest": m.config_hash},
    )
    for p in (out / "config.json", metrics, ckpt):
        m.record(p)
    m.write()
    return EXIT_OK


def _write_pgm(path, images: np.ndarray, per_row: int) -> None:
    n, h, w = images.shape[:3]
    rows = -(-n // per_row)
    grid = np.zeros((rows * h, per_row * w), dtype=np.uint8)
    pix = np.clip(np.round((images[..., 0] + 1.0) * 127.5), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, per_row)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = pix[i]
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (grid.shape[1], grid.shape[0]))
        fh.write(grid.tobytes())


def cmd_sample(args) -> int:
    from .mmdit import ConditioningInputs
    from .sample import SamplerConfig, sample_variant
    from .train import DatasetKind, load_state, make_dataset

    state, cfg, _ = load_state(args.checkpoint)
    seed = _env_seed(args.seed)
    sc = SamplerConfig(steps=args.steps, guidance=args.guidance, shift=args.shift)
    settings = json.dumps({"checkpoint_config": json.loads(cfg.to_json()), "sampler": dataclasses.asdict(sc), "n": args.n, "seed": seed, "raw": args.raw}, sort_keys=True)
    m = _manifest("sample", settings, args, seed)
    ds = make_dataset(cfg.dataset, cfg.model.caption_len)
    labels = np.arange(args.n) % ds.n_classes
    if args.label is not None:
        labels = np.full(args.n, args.label)
    noise = np.random.default_rng(seed).normal(size=(args.n,) + ds.latent_shape)
    cond = ConditioningInputs(ds.captions(labels), np.ones((args.n, cfg.model.n_encoders), dtype=bool))
    weights = state.params if args.raw else state.ema
    out = Path(args.out)
    res = sample_variant(cfg.spec, weights, cfg.model, cond, noise, sc, return_trajectory=args.trajectory)
    x, traj = res if args.trajectory else (res, None)
    if ds.kind is DatasetKind.SHAPES:
        path = out / "samples.pgm"
        _write_pgm(path, x, per_row=int(np.ceil(np.sqrt(args.n))))
    else:
        path = out / "samples.csv"
        with open(path, "w") as fh:
            fh.write(m.preamble + "label,x,y\n")
            for lab, p in zip(labels, x.reshape(args.n, -1)):
                fh.write(f"{lab},{p[0]!r},{p[1]!r}\n")
    m.record(path)
    if traj is not None:
        tpath = out / "trajectory.csv"
        grid = sc.grid()
        with open(tpath, "w") as fh:
            fh.write(m.preamble + "step,t,sample," + ",".join(f"z{j}" for j in range(traj[0, 0].size)) + "\n")
            for k in range(traj.shape[0]):
                for i in range(args.n):
                    fh.write(f"{k},{grid[k]!r},{i}," + ",".join(repr(float(v)) for v in traj[k, i].reshape(-1)) + "\n")
        m.record(tpath)
    m.write()
    if not args.quiet:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_densities(args) -> int:
    from .timesamplers import induced_weight
    from .variants import parse_variant

    spec = parse_variant(args.variant)
    m = _manifest("densities", json.dumps({"variant": spec.label, "points": args.points}), args, None)
    t = np.linspace(0.0, 1.0, args.points + 2)[1:-1]
    s = spec.schedule
    with np.errstate(all="ignore"):
        cols = [t, s.a(t), s.b(t), s.lam(t), s.dlam(t), spec.density.pdf(t), induced_weight(spec.density, t)]
    path = Path(args.out) / "densities.csv"
    with open(path, "w") as fh:
        fh.write(m.preamble + "t,a,b,lambda,dlambda,pdf,rf_weight\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    m.record(path)
    m.write()
    return EXIT_OK


def cmd_rank(args) -> int:
    from . import evalrank as E

    cfg_dict = _read_json(args.config) if args.config else {}
    fields = {f.name for f in dataclasses.fields(E.StudyConfig)}
    unknown = set(cfg_dict) - fields
    if unknown:
        raise ConfigError(f"unknown study config keys: {sorted(unknown)}")
    for k in ("variants", "datasets", "seeds", "emas"):
        if k in cfg_dict:
            cfg_dict[k] = tuple(cfg_dict[k])
    if "settings" in cfg_dict:
        cfg_dict["settings"] = tuple(tuple(s) for s in cfg_dict["settings"])
    if "diagnostics" in cfg_dict:
        cfg_dict["diagnostics"] = tuple(tuple(s) for s in cfg_dict["diagnostics"])
    study = E.StudyConfig(**cfg_dict)
    env = _env_seed(None)
    if env is not None:
        study = dataclasses.replace(study, seeds=(env,))
    m = _manifest("rank", json.dumps(dataclasses.asdict(study), sort_keys=True), args, env)
    out = Path(args.out)

    if args.dry_run:
        variants = [v.label for v in E.variant_grid()] if args.full_grid else list(study.variants)
        datasets = E.DATASETS if args.full_grid else study.datasets
        cells = E.planned_cells(variants, datasets, study.emas, study.settings)
        path = out / "plan.csv"
        with open(path, "w") as fh:
            fh.write(m.preamble + "variant,dataset,ema,steps,guidance\n")
            for v, c in cells:
                fh.write(f"{v},{c.dataset},{int(c.ema)},{c.steps},{c.guidance}\n")
        m.record(path)
        m.write()
        print(f"{len(variants)} variants x {len(cells) // max(1, len(variants))} cells = {len(cells)} planned cells")
        return EXIT_OK

    if args.records:
        records = _read_records(args.records)
        by_seed = {0: records}
    else:
        if not study.variants or not study.seeds or not study.datasets:
            raise ConfigError("empty study: need at least one variant, dataset and seed")

        def progress(seed, ds, v, recs, ratio):
            if not args.quiet:
                print(f"seed {seed} {ds} {v}: path ratio {ratio:.4f}", flush=True)

        result = E.run_study(study, progress)
        by_seed = result.records
        with open(out / "diagnostics.csv", "w") as fh:
            fh.write(m.preamble + "seed,dataset,variant,path_ratio,w2_degradation_g1,w2_degradation_g5\n")
            for (seed, ds, v), ratio in sorted(result.path_ratio.items()):
                d1 = E.relative_degradation(result, seed, ds, v, guidance=1.0)
                d5 = E.relative_degradation(result, seed, ds, v, guidance=5.0)
                fh.write(f"{seed},{ds},{v},{ratio!r},{d1!r},{d5!r}\n")
        m.record(out / "diagnostics.csv")
    if not any(by_seed.values()):
        raise ConfigError("empty study: no metric records")
    for seed, records in sorted(by_seed.items()):
        ranks = E.rank_cells(records)
        expected = len(study.datasets) * len(study.emas) * len(study.settings) if not args.records else None
        rows = E.average_rank(ranks, expected)
        suffix = "" if len(by_seed) == 1 else f"_seed{seed}"
        E.write_rank_csv(rows, out / f"ranks{suffix}.csv", m.preamble)
        E.write_records_csv(records, out / f"records{suffix}.csv", ranks, m.preamble)
        (out / f"scatter{suffix}.svg").write_text(E.scatter_svg(records, f"objectives, seed {seed}", preamble=m.preamble))
        for name in (f"ranks{suffix}.csv", f"records{suffix}.csv", f"scatter{suffix}.svg"):
            m.record(out / name)
        if not args.quiet:
            print(E.format_rank_table(rows))
            missing = [r.variant for r in rows if r.completeness < 1.0]
            if missing:
                print(f"incomplete cells for: {', '.join(missing)}")
    m.write()
    return EXIT_OK


def _read_records(path):
    import csv

    from . import evalrank as E
    from .dataguard import CorpusFormatError

    records = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for lineno, row in enumerate(reader, start=2):
        try:
            control = E.Control(row["dataset"], bool(int(row["ema"])), int(row["steps"]), float(row["guidance"]))
            records.append(E.MetricRecord(row["variant"], control, float(row["fidelity"]), float(row["w2"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records


def cmd_shift_study(args) -> int:
    from .sample import DEFAULT_SHIFT_1024, shift_by_alpha, uncertainty_sigma

    alphas = _floats(args.alphas)
    if any(a <= 0 for a in alphas):
        raise ConfigError("every shift alpha must be positive")
    if DEFAULT_SHIFT_1024 not in alphas:
        alphas.append(DEFAULT_SHIFT_1024)
    resolutions = [int(v) for v in _floats(args.resolutions)]
    m = _manifest("shift-study", json.dumps({"alphas": alphas, "resolutions": resolutions, "points": args.points}), args, None)
    out = Path(args.out)
    t = np.linspace(0.0, 1.0, args.points)
    grid_path = out / "shift_grid.csv"
    with open(grid_path, "w") as fh:
        fh.write(m.preamble + "alpha,default_1024,t,t_shifted,lambda_shift,minus_2_log_alpha,monotone\n")
        for a in sorted(set(alphas)):
            ts = shift_by_alpha(t, a)
            mono = bool(np.all(np.diff(ts) > 0)) and ts[0] == 0.0 and ts[-1] == 1.0
            ref = float(-2 * np.log(a))
            for tn, tm in zip(t.tolist(), np.asarray(ts, dtype=float).tolist()):
                shift = ""
                if 0.0 < tn < 1.0:
                    shift = repr(float(2 * (np.log1p(-tm) - np.log(tm)) - 2 * (np.log1p(-tn) - np.log(tn))))
                fh.write(f"{float(a)!r},{int(a == DEFAULT_SHIFT_1024)},{tn!r},{tm!r},{shift},{ref!r},{int(mono)}\n")
    sigma_path = out / "sigma_curves.csv"
    with open(sigma_path, "w") as fh:
        fh.write(m.preamble + "pixels,t,sigma\n")
        for n in resolutions:
            for tn in t[1:-1]:
                fh.write(f"{n},{tn!r},{float(uncertainty_sigma(tn, n))!r}\n")
    m.record(grid_path)
    m.record(sigma_path)
    m.write()
    return EXIT_OK


def cmd_dedup(args) -> int:
    from .dataguard import dedup_sweep, read_vector_csv, write_dedup_csv

    seed = _env_seed(args.seed)
    thresholds = _floats(args.thresholds)
    ids, vecs = read_vector_csv(args.corpus)
    m = _manifest("dedup", json.dumps({"corpus": os.path.abspath(args.corpus), "thresholds": thresholds, "clusters": args.clusters, "seed": seed}), args, seed)
    clusters = min(args.clusters, len(ids)) if ids else 1
    rows = dedup_sweep(vecs, ids, thresholds, clusters, seed)
    path = Path(args.out) / "dedup_report.csv"
    write_dedup_csv(rows, path, m.preamble)
    m.record(path)
    m.write()
    if not args.quiet:
        for r in rows:
            print(f"threshold {r.threshold:g}: removed {r.removed}/{r.before} ({r.fraction:.2%})")
    return EXIT_OK


def cmd_memcheck(args) -> int:
    from .dataguard import detect_memorization, read_vector_csv

    keys, vecs = read_vector_csv(args.generations, leading=2)
    side = args.side
    if vecs.size and vecs.shape[1] != side * side:
        raise ConfigError(f"rows hold {vecs.shape[1]} pixels, expected side^2 = {side * side}")
    sweep = sorted(set(_floats(args.eps_sweep) + [args.eps])) if args.eps_sweep else [args.eps]
    m = _manifest("memcheck", json.dumps({"generations": os.path.abspath(args.generations), "eps": sweep, "T": args.T, "tiles": args.tiles, "search": args.search}), args, None)
    gens: dict = {}
    for (prompt, gid), v in zip(keys, vecs):
        ids, imgs = gens.setdefault(prompt, ([], []))
        ids.append(gid)
        imgs.append(v.reshape(side, side))
    out = Path(args.out)
    marked_at = {e: detect_memorization(gens, e, args.T, args.tiles, args.search) if gens else set() for e in sweep}
    mpath = out / "memorized.csv"
    with open(mpath, "w") as fh:
        fh.write(m.preamble + "id\n")
        for gid in sorted(marked_at[args.eps]):
            fh.write(f"{gid}\n")
    spath = out / "eps_sweep.csv"
    with open(spath, "w") as fh:
        fh.write(m.preamble + "eps,marked\n")
        for e in sweep:
            fh.write(f"{e!r},{len(marked_at[e])}\n")
    m.record(mpath)
    m.record(spath)
    m.write()
    if not args.quiet:
        print(f"{len(marked_at[args.eps])} generations marked at eps={args.eps:g}")
    return EXIT_OK


# parser ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowlab", description="Train, sample and compare flow and diffusion formulations at toy scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")

    t = sub.add_parser("train", help="train one variant on a toy dataset")
    common(t)
    t.add_argument("--config", help="training config JSON (TrainConfig fields)")
    t.add_argument("--variant", help="variant label, e.g. rf/lognorm(0.00,1.00)")
    t.add_argument("--dataset", help="gaussmix2d, checkerboard2d or shapes")
    t.add_argument("--steps", type=int, help="total optimizer steps")
    t.add_argument("--depth", type=int, help="MM-DiT depth (hidden width 64 x depth)")
    t.add_argument("--seed", type=int, help="random seed (FLOWLAB_SEED takes precedence)")
    t.add_argument("--resume", help="checkpoint to resume from; its stored config is used")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample from a trained checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True, help="training checkpoint")
    s.add_argument("--n", type=int, default=256, help="number of samples")
    s.add_argument("--steps", type=int, default=50, help="Euler steps")
    s.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale")
    s.add_argument("--shift", type=float, default=1.0, help="timestep shift alpha")
    s.add_argument("--label", type=int, help="condition every sample on this class")
    s.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
    s.add_argument("--trajectory", action="store_true", help="also dump the trajectory CSV")
    s.add_argument("--seed", type=int, default=0, help="noise seed (FLOWLAB_SEED takes precedence)")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("densities", help="dump schedule and density curves for a variant")
    d.add_argument("action", choices=["dump"], help="what to do")
    common(d)
    d.add_argument("--variant", required=True, help="variant label")
    d.add_argument("--points", type=int, default=99, help="interior grid points")
    d.set_defaults(func=cmd_densities)

    r = sub.add_parser("rank", help="run or re-rank the variant study")
    common(r)
    r.add_argument("--config", help="study config JSON (StudyConfig fields)")
    r.add_argument("--records", help="rank an existing records CSV instead of training")
    r.add_argument("--dry-run", action="store_true", help="only list the planned cells")
    r.add_argument("--full-grid", action="store_true", help="with --dry-run: plan all 61 variants on both datasets")
    r.set_defaults(func=cmd_rank)

    h = sub.add_parser("shift-study", help="tabulate resolution-dependent timestep shifts")
    common(h)
    h.add_argument("--alphas", default="1,1.5,2,3,4", help="comma-separated shift factors")
    h.add_argument("--resolutions", default="4096,16384,65536,262144,1048576", help="comma-separated pixel counts")
    h.add_argument("--points", type=int, default=21, help="grid points on [0, 1]")
    h.set_defaults(func=cmd_shift_study)

    u = sub.add_parser("dedup", help="cluster-scoped near-duplicate sweep over an embedding CSV")
    common(u)
    u.add_argument("--corpus", required=True, help="CSV: id,v0,v1,...")
    u.add_argument("--thresholds", default="0,0.05,0.1,0.2,0.5", help="comma-separated distance thresholds")
    u.add_argument("--clusters", type=int, default=1, help="number of k-means clusters")
    u.add_argument("--seed", type=int, default=0, help="clustering seed (FLOWLAB_SEED takes precedence)")
    u.set_defaults(func=cmd_dedup)

    mc = sub.add_parser("memcheck", help="detect memorization cliques among generations")
    common(mc)
    mc.add_argument("--generations", required=True, help="CSV: prompt,id,p0,p1,... with pixels on [0, 1]")
    mc.add_argument("--side", type=int, required=True, help="image side length in pixels")
    mc.add_argument("--eps", type=float, default=0.15, help="tiled-distance threshold")
    mc.add_argument("--T", type=int, default=10, help="clique size threshold")
    mc.add_argument("--tiles", type=int, default=4, help="tiles per side")
    mc.add_argument("--eps-sweep", help="comma-separated extra thresholds for the sweep report")
    mc.add_argument("--search", choices=["exact", "greedy"], default="exact", help="clique search: exact maximal cliques or greedy expansion")
    mc.set_defaults(func=cmd_memcheck)
    return p


def main(argv=None) -> int:
    from .dataguard import CorpusFormatError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CorpusFormatError, OSError) as exc:
        print(f"flowlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"flowlab: numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"flowlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
