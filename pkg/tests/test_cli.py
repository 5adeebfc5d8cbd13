import csv
import json

import numpy as np
import pytest

from blindsr import cli
from blindsr import degradation as D
from blindsr import gem as G
from blindsr.fileio import read_png, write_png


@pytest.fixture
def hr_dir(tmp_path):
    d = tmp_path / "hr_src"
    for i in range(3):
        rng = np.random.default_rng(i)
        write_png(d / f"img{i}.png", D.random_hr_image(rng, 32, channels=3 if i == 1 else 1))
    return d


FAST = ["--support", "9", "--max-outer", "2", "--e-steps", "2", "--m-cg-iters", "5", "--n-mc", "2"]


def synth(hr_dir, out, *extra):
    return cli.main(["synth", "--hr-dir", str(hr_dir), "--out", str(out), "--seed", "5",
                     "--support", "9", "--prior-rates", "0.5", *extra])


def test_help_exits_zero(capsys):
    for argv in (["--help"], ["solve", "--help"], ["train", "--help"], ["synth", "--help"], ["eval", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--b2", "--kernel-out", "--trace", "--jobs"):
        assert flag in out


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", "--no-such-flag"])
    assert exc.value.code == 2


def test_usage_errors_exit_two(tmp_path):
    assert cli.main(["solve", "--out", str(tmp_path / "x.png")]) == 2
    assert cli.main(["synth", "--hr-dir", str(tmp_path)]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text("[synth]\nbogus = 1\n")
    assert cli.main(["--config", str(cfg), "synth", "--hr-dir", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[solve]\nscale = 3\nsigma = 0.05\nn-mc = 4\n')
    parser = cli.build_parser()
    args = parser.parse_args(["--config", str(cfg), "solve", "--sigma", "0.02"])
    s = cli.resolve_settings("solve", args, args.config)
    assert s["sigma"] == 0.02          # command line
    assert s["scale"] == 3             # config file
    assert s["n_mc"] == 4
    assert s["ridge"] == cli.DEFAULTS["solve"]["ridge"]  # built-in default
    args = parser.parse_args(["solve"])
    assert cli.resolve_settings("solve", args, None)["scale"] == 2


def test_synth_from_config_and_manifest_count(tmp_path, hr_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[synth]\nhr_dir = "{hr_dir}"\nout = "{tmp_path / "ds"}"\nsupport = 9\n')
    assert cli.main(["--config", str(cfg), "synth"]) == 0
    lines = (tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == len(list(hr_dir.glob("*.png")))
    rec = json.loads(lines[0])
    assert len(rec["b2_true"]) == 3


def test_synth_missing_dir(tmp_path):
    assert cli.main(["synth", "--hr-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1


def test_solve_single_and_trace_rows(tmp_path, hr_dir):
    assert synth(hr_dir, tmp_path / "ds") == 0
    lr = tmp_path / "ds" / "lr" / "img0.png"
    out = tmp_path / "sr.png"
    code = cli.main(["solve", "--lr", str(lr), "--out", str(out), "--kernel-out", str(tmp_path / "k.txt"),
                     "--trace", str(tmp_path / "t.csv"), "--prior-rates", "0.5", *FAST])
    assert code == 0
    assert read_png(out).shape == (32, 32)
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == ["iter", "value", "data_term", "kl_term"]
    # Oracle: the same solve in-process.
    y = read_png(lr)
    s = cli.resolve_settings("solve", cli.build_parser().parse_args(
        ["solve", "--prior-rates", "0.5", *FAST]), None)
    from blindsr.estimators import derive_seed
    state = G.solve_blind(y, cli._gem_config(s, derive_seed(0, "solve:img0")))
    assert len(rows) - 1 == len(state.elbo_trace) == 2 * state.outer_iter
    assert float(rows[-1][1]) == state.elbo_trace[-1].value


def test_solve_nonblind_flag(tmp_path, hr_dir):
    synth(hr_dir, tmp_path / "ds")
    lr = tmp_path / "ds" / "lr" / "img0.png"
    code = cli.main(["solve", "--lr", str(lr), "--out", str(tmp_path / "nb.png"),
                     "--trace", str(tmp_path / "t.csv"), "--b2", "1.5", *FAST])
    assert code == 0
    expected = G.solve_nonblind(read_png(lr), [1.5], G.GemConfig(
        degradation=D.DegradationConfig(support=9), m_cg_iters=5))
    np.testing.assert_array_equal(read_png(tmp_path / "nb.png"),
                                  np.round(np.clip(expected, 0, 1) * 255) / 255)
    assert not (tmp_path / "t.csv").exists()


def test_solve_missing_input(tmp_path, capsys):
    missing = tmp_path / "missing.png"
    assert cli.main(["solve", "--lr", str(missing), "--out", str(tmp_path / "o.png")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_solve_manifest_partial_failure(tmp_path, hr_dir):
    synth(hr_dir, tmp_path / "ds")
    # Corrupt one LR file: that image fails, the others are still written.
    (tmp_path / "ds" / "lr" / "img2.png").write_bytes(b"broken")
    code = cli.main(["solve", "--manifest", str(tmp_path / "ds" / "manifest.jsonl"),
                     "--out-dir", str(tmp_path / "res"), "--jobs", "1", *FAST])
    assert code == 1
    assert (tmp_path / "res" / "sr" / "img0.png").is_file()
    assert not (tmp_path / "res" / "sr" / "img2.png").exists()


def test_solve_pool_matches_serial(tmp_path, hr_dir):
    synth(hr_dir, tmp_path / "ds")
    m = str(tmp_path / "ds" / "manifest.jsonl")
    assert cli.main(["solve", "--manifest", m, "--out-dir", str(tmp_path / "a"), "--jobs", "1", *FAST]) == 0
    assert cli.main(["solve", "--manifest", m, "--out-dir", str(tmp_path / "b"), "--jobs", "2", *FAST]) == 0
    for sub in ("sr", "kernels", "traces"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_eval_identical_and_mean(tmp_path, hr_dir, capsys):
    out = tmp_path / "m.csv"
    assert cli.main(["eval", "--sr-dir", str(hr_dir), "--hr-dir", str(hr_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3
    assert all(float(r["psnr_db"]) == 100.0 and float(r["ssim"]) == 1.0 for r in rows)
    assert "mean_psnr_db=100.0000" in capsys.readouterr().out


def test_eval_summary_is_row_mean(tmp_path, hr_dir, capsys):
    sr = tmp_path / "sr"
    for p in hr_dir.glob("*.png"):
        x = read_png(p)
        write_png(sr / p.name, np.clip(x + 0.05 * np.sin(np.arange(x.size)).reshape(x.shape), 0, 1))
    out = tmp_path / "m.csv"
    assert cli.main(["eval", "--sr-dir", str(sr), "--hr-dir", str(hr_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    mean_p = np.mean([float(r["psnr_db"]) for r in rows])
    mean_s = np.mean([float(r["ssim"]) for r in rows])
    assert f"mean_psnr_db={mean_p:.4f} mean_ssim={mean_s:.4f}" in capsys.readouterr().out


def test_eval_unmatched_and_empty(tmp_path, hr_dir, capsys):
    sr = tmp_path / "sr"
    write_png(sr / "img0.png", read_png(hr_dir / "img0.png"))
    write_png(sr / "other.png", read_png(hr_dir / "img0.png"))
    assert cli.main(["eval", "--sr-dir", str(sr), "--hr-dir", str(hr_dir), "--out", str(tmp_path / "m.csv")]) == 1
    err = capsys.readouterr().err
    assert "other" in err and "img1" in err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval", "--sr-dir", str(empty), "--hr-dir", str(hr_dir), "--out", str(tmp_path / "e.csv")]) == 1


def train_args(tmp_path, labeled, unlabeled=None, epochs="2", out="p.json"):
    argv = ["train", "--manifest", str(labeled), "--epochs", epochs, "--support", "9",
            "--prior-rates", "0.5", "--restorer-iters", "2", "--learning-rate", "0.001",
            "--out", str(tmp_path / out), "--curve", str(tmp_path / (out + ".csv"))]
    if unlabeled:
        argv += ["--unlabeled", str(unlabeled)]
    return argv


def test_train_eta_and_determinism(tmp_path, hr_dir, capsys):
    synth(hr_dir, tmp_path / "ds")
    m = tmp_path / "ds" / "manifest.jsonl"
    unl = tmp_path / "u.jsonl"
    recs = D.read_manifest(m)
    D.write_manifest(unl, [D.DatasetRecord(id=r.id, lr_path=str(tmp_path / "ds" / r.lr_path)) for r in recs[:2]])
    assert cli.main(train_args(tmp_path, m, unl)) == 0
    n, mm = len(recs), len(unl.read_text().splitlines())
    assert f"N={n} M={mm} eta={mm / (mm + n)!r}" in capsys.readouterr().out
    assert cli.main(train_args(tmp_path, m, unl, out="q.json")) == 0
    assert (tmp_path / "p.json").read_bytes() == (tmp_path / "q.json").read_bytes()
    curve = list(csv.reader((tmp_path / "p.json.csv").open()))
    assert curve[0] == ["epoch", "loss"] and len(curve) == 4


def test_train_zero_epochs_emits_initial(tmp_path, hr_dir):
    synth(hr_dir, tmp_path / "ds")
    assert cli.main(train_args(tmp_path, tmp_path / "ds" / "manifest.jsonl", epochs="0")) == 0
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["W"] == [[0.0] * 6] and d["T"] == 2 and d["P"] == 9


def test_train_divergence_exit_three(tmp_path, hr_dir, monkeypatch):
    synth(hr_dir, tmp_path / "ds")

    def boom(*a, **k):
        raise cli.estimators.TrainingDiverged("loss inf")

    monkeypatch.setattr(cli.estimators, "train", boom)
    assert cli.main(train_args(tmp_path, tmp_path / "ds" / "manifest.jsonl")) == 3


def test_synth_solve_eval_pipeline_deterministic(tmp_path, hr_dir):
    outs = []
    for run in ("r1", "r2"):
        base = tmp_path / run
        assert synth(hr_dir, base / "ds") == 0
        assert cli.main(["solve", "--manifest", str(base / "ds" / "manifest.jsonl"),
                         "--out-dir", str(base / "res"), *FAST]) == 0
        assert cli.main(["eval", "--sr-dir", str(base / "res" / "sr"), "--hr-dir", str(base / "ds" / "hr"),
                         "--out", str(base / "metrics.csv")]) == 0
        outs.append(base)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
