import json
import re
import subprocess
import sys

import numpy as np
import pytest

from flowlab import cli
from flowlab import tensor as T
from flowlab.dataguard import write_vector_csv

SUBCOMMANDS = ["train", "sample", "densities", "rank", "shift-study", "dedup", "memcheck"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def body(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("FLOWLAB_SEED", raising=False)


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_documents_every_flag(sub, capsys):
    parser = cli.build_parser()
    subparser = parser._subparsers._group_actions[0].choices[sub]
    for action in subparser._actions:
        if action.option_strings and "--help" not in action.option_strings:
            assert action.help, f"{sub} {action.option_strings} has no help text"
    with pytest.raises(SystemExit) as exc:
        parser.parse_args([sub, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for action in subparser._actions:
        for flag in action.option_strings:
            assert flag in text


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "flowlab.cli", "--help"], capture_output=True, text=True, check=True).stdout
    for sub in SUBCOMMANDS:
        assert sub in out


def train_args(out, steps=6, seed=1):
    return ["train", "--out", out, "--variant", "rf/lognorm(0.00,1.00)", "--dataset", "gaussmix2d", "--steps", steps, "--depth", 1, "--seed", seed, "--quiet"]


def test_train_writes_artifacts_with_hash(tmp_path):
    assert run(*train_args(tmp_path)) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    h = manifest["config_hash"]
    assert re.fullmatch(r"[0-9a-f]{40}", h)
    assert (tmp_path / "metrics.csv").read_text().startswith(f"# flowlab manifest {h}\n")
    assert json.loads((tmp_path / "config.json").read_text())["manifest"] == h
    _, meta = T.load_checkpoint(tmp_path / "checkpoint.flk")
    assert meta["manifest"] == h
    assert set(manifest["artifacts"]) == {"config.json", "metrics.csv", "checkpoint.flk"}


def test_train_is_reproducible(tmp_path):
    assert run(*train_args(tmp_path / "a")) == 0
    assert run(*train_args(tmp_path / "b")) == 0
    for name in ("metrics.csv", "config.json", "checkpoint.flk"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_file_round_trip(tmp_path):
    assert run(*train_args(tmp_path / "a")) == 0
    assert run("train", "--out", tmp_path / "b", "--config", tmp_path / "a" / "config.json", "--quiet") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_env_seed_overrides(tmp_path, monkeypatch):
    assert run(*train_args(tmp_path / "a", seed=5)) == 0
    monkeypatch.setenv("FLOWLAB_SEED", "5")
    assert run(*train_args(tmp_path / "b", seed=1)) == 0
    assert body(tmp_path / "a" / "metrics.csv") == body(tmp_path / "b" / "metrics.csv")
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 5
    monkeypatch.setenv("FLOWLAB_SEED", "x")
    assert run(*train_args(tmp_path / "c")) == 2


def test_resume_matches_uninterrupted(tmp_path):
    assert run(*train_args(tmp_path / "full", steps=8)) == 0
    assert run(*train_args(tmp_path / "part", steps=4)) == 0
    assert run("train", "--out", tmp_path / "part", "--resume", tmp_path / "part" / "checkpoint.flk", "--steps", 8, "--seed", 1, "--quiet") == 0
    full, part = body(tmp_path / "full" / "metrics.csv"), body(tmp_path / "part" / "metrics.csv")
    # the interrupted run validates at its own last step; training columns must still agree
    assert [r.split(",")[:4] for r in full] == [r.split(",")[:4] for r in part]
    assert full[-1] == part[-1]


def test_exit_codes(tmp_path, capsys):
    assert run("train", "--out", tmp_path, "--variant", "rf/mode(2.5)", "--quiet") == 2
    assert "2/(pi-2)" in capsys.readouterr().err
    assert run("train", "--out", tmp_path, "--variant", "rf/lognrm(0,1)", "--quiet") == 2
    assert "did you mean" in capsys.readouterr().err
    assert run("sample", "--out", tmp_path, "--checkpoint", tmp_path / "missing.flk") == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run("train", "--out", tmp_path, "--config", bad) == 2
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


def test_numerical_fault_exit_code(tmp_path, monkeypatch):
    from flowlab import train as TR

    def boom(*a, **k):
        raise TR.TrainingFault("non-finite loss at step 3")

    monkeypatch.setattr(TR, "train", boom)
    assert run(*train_args(tmp_path)) == 3


def test_sample_outputs(tmp_path):
    assert run(*train_args(tmp_path / "t")) == 0
    ck = tmp_path / "t" / "checkpoint.flk"
    assert run("sample", "--out", tmp_path / "s", "--checkpoint", ck, "--n", 16, "--steps", 5, "--trajectory", "--quiet") == 0
    rows = body(tmp_path / "s" / "samples.csv")
    assert rows[0] == "label,x,y" and len(rows) == 17
    traj = body(tmp_path / "s" / "trajectory.csv")
    assert len(traj) == 1 + 6 * 16
    assert run("sample", "--out", tmp_path / "s2", "--checkpoint", ck, "--n", 16, "--steps", 5, "--quiet") == 0
    assert (tmp_path / "s" / "samples.csv").read_bytes() == (tmp_path / "s2" / "samples.csv").read_bytes()


def test_sample_image_dataset_writes_pgm(tmp_path):
    assert run("train", "--out", tmp_path / "t", "--dataset", "shapes", "--steps", 2, "--depth", 1, "--quiet") == 0
    assert run("sample", "--out", tmp_path / "s", "--checkpoint", tmp_path / "t" / "checkpoint.flk", "--n", 4, "--steps", 2, "--quiet") == 0
    raw = (tmp_path / "s" / "samples.pgm").read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n") and len(raw) == len(b"P5\n32 32\n255\n") + 32 * 32


def test_densities_dump(tmp_path):
    assert run("densities", "dump", "--out", tmp_path, "--variant", "rf/lognorm(0.00,1.00)", "--points", 9) == 0
    rows = body(tmp_path / "densities.csv")
    assert rows[0] == "t,a,b,lambda,dlambda,pdf,rf_weight"
    mid = [float(v) for v in rows[5].split(",")]
    assert mid[0] == 0.5 and mid[3] == 0.0 and mid[5] == pytest.approx(1.5957691216)


def test_rank_dry_run_full_grid(tmp_path, capsys):
    assert run("rank", "--out", tmp_path, "--dry-run", "--full-grid") == 0
    assert "1464 planned cells" in capsys.readouterr().out
    assert len(body(tmp_path / "plan.csv")) == 1 + 61 * 24


def test_rank_from_records(tmp_path):
    recs = tmp_path / "records.csv"
    recs.write_text(
        "variant,dataset,ema,steps,guidance,fidelity,w2\n"
        "p,d,1,50,1.0,0.9,0.1\nq,d,1,50,1.0,0.8,0.2\nr,d,1,50,1.0,0.95,0.3\n"
        "p,d,1,5,5.0,0.5,0.5\nq,d,1,5,5.0,0.6,0.4\nr,d,1,5,5.0,0.4,0.6\n"
    )
    assert run("rank", "--out", tmp_path / "o", "--records", recs, "--quiet") == 0
    rows = body(tmp_path / "o" / "ranks.csv")
    assert rows[1].startswith("p,1.5000") and rows[2].startswith("q,1.5000") and rows[3].startswith("r,2.0000")
    assert (tmp_path / "o" / "scatter.svg").read_text().startswith("<svg")
    recs.write_text("variant,dataset,ema,steps,guidance,fidelity,w2\np,d,1,50,1.0,0.9\n")
    assert run("rank", "--out", tmp_path / "o", "--records", recs) == 4
    recs.write_text("variant,dataset,ema,steps,guidance,fidelity,w2\n")
    assert run("rank", "--out", tmp_path / "o", "--records", recs) == 2


def test_rank_rejects_empty_study(tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"variants": []}))
    assert run("rank", "--out", tmp_path, "--config", cfg) == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("rank", "--out", tmp_path, "--config", cfg) == 2


def test_shift_study(tmp_path):
    assert run("shift-study", "--out", tmp_path, "--alphas", "1,2", "--points", 11) == 0
    rows = [r.split(",") for r in body(tmp_path / "shift_grid.csv")[1:]]
    assert {r[0] for r in rows} == {"1.0", "2.0", "3.0"}
    for r in rows:
        if r[0] == "1.0":
            assert r[2] == r[3]
        if r[0] == "3.0":
            assert r[1] == "1"
        if r[4]:
            assert abs(float(r[4]) - float(r[5])) < 1e-9
        assert r[6] == "1"
    assert run("shift-study", "--out", tmp_path, "--alphas", "0,2") == 2
    sig = body(tmp_path / "sigma_curves.csv")
    assert sig[0] == "pixels,t,sigma"


def test_dedup_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    base = rng.normal(size=(40, 4)) * 5
    vecs = np.vstack([base, base[:10] + 1e-4])
    write_vector_csv(tmp_path / "c.csv", [f"i{k}" for k in range(50)], vecs)
    assert run("dedup", "--out", tmp_path / "o", "--corpus", tmp_path / "c.csv", "--thresholds", "0,0.01", "--clusters", 3) == 0
    rows = body(tmp_path / "o" / "dedup_report.csv")
    assert rows[1].split(",")[:3] == ["0.0", "50", "0"]
    assert rows[2].split(",")[:3] == ["0.01", "50", "10"]
    (tmp_path / "e.csv").write_text("id,v0\n")
    assert run("dedup", "--out", tmp_path / "e", "--corpus", tmp_path / "e.csv", "--quiet") == 0
    assert body(tmp_path / "e" / "dedup_report.csv")[1].split(",")[:3] == ["0.0", "0", "0"]
    (tmp_path / "bad.csv").write_text("id,v0,v1\na,1,2\nb,1\n")
    assert run("dedup", "--out", tmp_path / "b", "--corpus", tmp_path / "bad.csv") == 4
    assert "bad.csv:3:" in capsys.readouterr().err


def memcheck_corpus(path):
    rng = np.random.default_rng(3)
    base = rng.random(64)
    rows, keys = [], []
    for g in range(8):
        img = base + rng.uniform(-1e-3, 1e-3, 64) if g < 4 else rng.random(64)
        keys.append(("p0", f"g{g}"))
        rows.append(img)
    write_vector_csv(path, keys, np.array(rows), key_names=("prompt", "id"))


def test_memcheck_command(tmp_path):
    memcheck_corpus(tmp_path / "g.csv")
    assert run("memcheck", "--out", tmp_path / "o", "--generations", tmp_path / "g.csv", "--side", 8, "--T", 3, "--eps-sweep", "0.01,0.5,1,2,4", "--quiet") == 0
    assert body(tmp_path / "o" / "memorized.csv") == ["id", "g0", "g1", "g2", "g3"]
    counts = [int(r.split(",")[1]) for r in body(tmp_path / "o" / "eps_sweep.csv")[1:]]
    assert counts == sorted(counts)
    assert run("memcheck", "--out", tmp_path / "o", "--generations", tmp_path / "g.csv", "--side", 7) == 2
