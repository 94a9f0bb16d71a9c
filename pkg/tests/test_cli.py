import re

import numpy as np
import pytest

from gpnr import checks
from gpnr import geometry as geo
from gpnr.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main, parse_kv, resolve_threads
from gpnr.model import load_params, render_image
from gpnr.scenes import load_scene, read_ppm

TINY_CFG = """\
# tiny run
patch_size = 3
k = 2
m = 4
n = 3
freqs = 2
embed_dim = 4
width = 8
blocks = 1
heads = 2
feature_hidden = 8
batch_rays = 16
total_steps = 6
warmup_steps = 1
base_lr = 1e-3
log_every = 1
checkpoint_every = 3
eval_every = 3
holdout = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-scene", "--preset", "plane-sphere", "--views", "6", "--size", "16", "--out", str(d / "scene")]) == 0
    (d / "run.cfg").write_text(TINY_CFG, encoding="utf-8")
    assert main(["train", "--config", str(d / "run.cfg"), "--scenes", str(d / "scene"), "--out", str(d / "run")]) == 0
    return d


class TestGenScene:
    def test_writes_scene(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-scene", "--preset", "plane-checker", "--views", "12", "--size", "20", "--out", tmp_path / "s")
        assert code == EXIT_OK
        assert re.match(r"views=12 size=20x20 near=\d+\.\d+ far=\d+\.\d+ -> ", out)
        scene = load_scene(tmp_path / "s")
        assert scene.images.shape == (12, 20, 20, 3)
        assert len(list((tmp_path / "s").glob("*.ppm"))) == 12

    @pytest.mark.parametrize("preset", [["--preset", "plane-sphere"], ["--preset", "random", "--seed", "5"]])
    def test_byte_identical_reruns(self, tmp_path, capsys, preset):
        for name in ("a", "b"):
            assert run(capsys, "gen-scene", *preset, "--views", "4", "--size", "12", "--out", tmp_path / name)[0] == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_random_seed_matters(self, tmp_path, capsys):
        for seed in (1, 2):
            run(capsys, "gen-scene", "--preset", "random", "--seed", seed, "--views", "4", "--size", "12", "--out", tmp_path / str(seed))
        assert not np.array_equal(load_scene(tmp_path / "1").images, load_scene(tmp_path / "2").images)

    def test_spec_file_and_flag_override(self, tmp_path, capsys):
        (tmp_path / "spec.txt").write_text("preset = plane-checker\nviews = 5\nsize = 14\n", encoding="utf-8")
        code, out, _ = run(capsys, "gen-scene", "--spec", tmp_path / "spec.txt", "--views", "3", "--out", tmp_path / "s")
        assert code == 0 and out.startswith("views=3 size=14x14")

    def test_unwritable_out(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "gen-scene", "--views", "3", "--size", "12", "--out", blocker / "sub")
        assert code == EXIT_USAGE
        assert "cannot write" in err

    @pytest.mark.parametrize(
        "spec,msg",
        [("preset = cube\n", "unknown preset"), ("colour = red\n", "unknown scene key"), ("views = many\n", "views"), ("views = 1\n", "invalid scene")],
    )
    def test_invalid_spec(self, tmp_path, capsys, spec, msg):
        (tmp_path / "spec.txt").write_text(spec, encoding="utf-8")
        code, _, err = run(capsys, "gen-scene", "--spec", tmp_path / "spec.txt", "--out", tmp_path / "s")
        assert code == EXIT_USAGE
        assert msg in err


class TestConfig:
    def test_parse_kv(self):
        text = "# header\n a = 1 \n\nb=two # trailing\nc = x = y\n"
        assert parse_kv(text) == {"a": "1", "b": "two", "c": "x = y"}

    @pytest.mark.parametrize("text,msg", [("a = 1\nbogus\n", "cfg:2"), ("a = 1\na = 2\n", "duplicate"), (" = 3\n", "empty key")])
    def test_parse_errors(self, text, msg):
        with pytest.raises(UsageError, match=msg):
            parse_kv(text, "cfg")

    def test_unknown_key_rejected(self):
        with pytest.raises(UsageError, match="wdith"):
            RunConfig.from_values({"wdith": "8"})

    def test_bad_value(self):
        with pytest.raises(UsageError, match="'k'"):
            RunConfig.from_values({"k": "two"})

    def test_invalid_combination(self):
        with pytest.raises(UsageError, match="invalid configuration"):
            RunConfig.from_values({"total_steps": "5", "warmup_steps": "5"})

    def test_groups(self):
        run_cfg = RunConfig.from_values(parse_kv(TINY_CFG + "scenes = a, b\nout = o\n"))
        assert (run_cfg.sampler.k, run_cfg.model.width, run_cfg.train.total_steps) == (2, 8, 6)
        assert run_cfg.scenes == ["a", "b"] and run_cfg.holdout == [2] and run_cfg.out == "o"

    def test_unknown_key_stops_train_before_work(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text(TINY_CFG + "learning_rate = 1\n", encoding="utf-8")
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--scenes", tmp_path / "nowhere", "--out", tmp_path / "o")
        assert code == EXIT_USAGE and "learning_rate" in err
        assert not (tmp_path / "o").exists()


class TestThreads:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("GPNR_THREADS", "3")
        assert resolve_threads(2) == 2

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("GPNR_THREADS", "3")
        assert resolve_threads(None) == 3
        monkeypatch.delenv("GPNR_THREADS")
        assert resolve_threads(None) == 1

    @pytest.mark.parametrize("env", ["zero", "0"])
    def test_bad_env(self, monkeypatch, env):
        monkeypatch.setenv("GPNR_THREADS", env)
        with pytest.raises(UsageError):
            resolve_threads(None)


class TestTrain:
    def test_outputs(self, workdir):
        names = {p.name for p in (workdir / "run").iterdir()}
        assert {"final.gpnr", "metrics.jsonl", "ckpt_000003.gpnr", "ckpt_000006.gpnr"} <= names

    def test_summary_line(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--out", tmp_path / "o")
        assert code == EXIT_OK
        assert re.fullmatch(r"done steps=6 loss=\S+ eval_psnr=\d+\.\d{4} -> \S+final.gpnr\n", out)

    def test_flags_override_config(self, workdir, tmp_path, capsys):
        code, out, _ = run(
            capsys, "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--out", tmp_path / "o", "--total-steps", "4"
        )
        assert code == 0 and "steps=4" in out

    def test_resume_continues_exactly(self, workdir, tmp_path, capsys):
        code, _, _ = run(
            capsys,
            "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--out", tmp_path / "r",
            "--resume", workdir / "run" / "ckpt_000003.gpnr",
        )  # fmt: skip
        assert code == 0
        assert (tmp_path / "r" / "final.gpnr").read_bytes() == (workdir / "run" / "final.gpnr").read_bytes()

    def test_missing_scene(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", workdir / "run.cfg", "--scenes", tmp_path / "nope", "--out", tmp_path / "o")
        assert code == EXIT_USAGE and "not found" in err

    def test_missing_out(self, workdir, capsys):
        code, _, err = run(capsys, "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene")
        assert code == EXIT_USAGE and "--out" in err

    def test_holdout_out_of_range(self, workdir, tmp_path, capsys):
        code, _, err = run(
            capsys, "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--out", tmp_path / "o", "--holdout", "9"
        )
        assert code == EXIT_USAGE and "out of range" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, workdir, tmp_path, capsys):
        code, _, err = run(
            capsys, "train", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--out", tmp_path / "o", "--base-lr", "1e300"
        )
        assert code == EXIT_NUMERIC
        assert re.search(r"non-finite loss at step \d+", err)


class TestRender:
    def test_view(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--view", 1, "--out", tmp_path / "v.ppm")
        assert code == 0 and re.fullmatch(r"wrote \S+ psnr=\d+\.\d{4}\n", out)
        assert read_ppm(tmp_path / "v.ppm").shape == (16, 16, 3)

    def test_pose(self, workdir, tmp_path, capsys):
        pose = load_scene(workdir / "scene").poses[2]
        arg = ",".join(repr(float(x)) for x in [*pose.R.reshape(-1), *pose.t])
        code, out, _ = run(capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--pose", arg, "--out", tmp_path / "p.ppm")
        assert code == 0 and "psnr" not in out

    @pytest.mark.parametrize("pose", ["1,2,3", "a,b,c,d,e,f,g,h,i,j,k,l", "2,0,0,0,1,0,0,0,1,0,0,0"])
    def test_bad_pose(self, workdir, tmp_path, capsys, pose):
        code, _, err = run(capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--pose", pose, "--out", tmp_path / "p.ppm")
        assert code == EXIT_USAGE and "--pose" in err

    def test_view_out_of_range(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--view", 6, "--out", tmp_path / "v.ppm")
        assert code == EXIT_USAGE

    def test_fp64_matches_fp32(self, workdir, tmp_path, capsys):
        ckpt, scene_dir = workdir / "run" / "final.gpnr", workdir / "scene"
        scene = load_scene(scene_dir)
        refs = scene.subset([0, 2, 3, 4, 5])
        imgs = [render_image(load_params(ckpt, dtype=dt)[0], refs, scene.poses[1], scene.intrinsics) for dt in (np.float32, np.float64)]
        assert np.abs(imgs[0] - imgs[1]).max() < 1e-3
        for flag in ("--fp32", "--fp64"):
            assert run(capsys, "render", "--checkpoint", ckpt, "--scene", scene_dir, "--view", 1, flag, "--out", tmp_path / f"{flag}.ppm")[0] == 0
        a, b = (read_ppm(tmp_path / f"{f}.ppm") for f in ("--fp32", "--fp64"))
        assert np.abs(a - b).max() <= 1 / 255 + 1e-12  # at most one quantization level

    def test_dump_attention(self, workdir, tmp_path, capsys):
        d = tmp_path / "att"
        code, _, _ = run(capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--view", 2, "--out", tmp_path / "v.ppm", "--dump-attention", d)
        assert code == 0
        beta = np.load(d / "beta.npy")
        assert beta.shape == (16, 16, 2)
        np.testing.assert_allclose(beta.sum(-1), 1.0, atol=1e-6)
        views = np.load(d / "views.npy")
        assert not (views == 2).any()  # the target never references itself
        for k in range(2):
            assert read_ppm(d / f"beta_{k}.ppm").shape == (16, 16, 3)
            depth = read_ppm(d / f"depth_{k}.ppm")
            assert (depth == depth[..., :1]).all()  # gray

    def test_incompatible_checkpoint_names_field(self, workdir, tmp_path, capsys):
        (tmp_path / "wide.cfg").write_text(TINY_CFG.replace("width = 8", "width = 16"), encoding="utf-8")
        code, _, err = run(
            capsys, "render", "--checkpoint", workdir / "run" / "final.gpnr", "--scene", workdir / "scene", "--out", tmp_path / "v.ppm", "--config", tmp_path / "wide.cfg"
        )
        assert code == EXIT_USAGE
        assert "width" in err

    def test_missing_checkpoint(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "render", "--checkpoint", tmp_path / "none.gpnr", "--scene", workdir / "scene", "--out", tmp_path / "v.ppm")
        assert code == EXIT_USAGE and "checkpoint not found" in err


def parse_table(text):
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    return header, [dict(zip(header, line.split(","))) for line in lines[1:]]


class TestEval:
    def test_table_and_csv(self, workdir, tmp_path, capsys):
        csv = tmp_path / "t.csv"
        code, out, _ = run(capsys, "eval", "--checkpoint", workdir / "run" / "final.gpnr", "--scenes", workdir / "scene", "--held-out", "2,4", "--csv", csv)
        assert code == 0
        assert csv.read_text(encoding="utf-8") == out
        header, rows = parse_table(out)
        assert header[:3] == ["view", "psnr", "ssim"]
        assert [r["view"] for r in rows] == ["view2", "view4", "mean"]
        for col in ("psnr", "ssim"):
            assert float(rows[-1][col]) == pytest.approx(np.mean([float(r[col]) for r in rows[:-1]]), abs=1e-4)

    def test_all_views_by_default(self, workdir, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", workdir / "run" / "final.gpnr", "--scenes", workdir / "scene")
        assert code == 0
        assert len(parse_table(out)[1]) == 7

    def test_needs_checkpoint(self, workdir, capsys):
        assert run(capsys, "eval", "--scenes", workdir / "scene")[0] == EXIT_USAGE

    def test_sweep(self, workdir, capsys):
        code, out, _ = run(capsys, "eval", "--sweep-k", "1,2", "--config", workdir / "run.cfg", "--scenes", workdir / "scene", "--total-steps", "3")
        assert code == 0
        header, rows = parse_table(out)
        assert header[0] == "K"
        assert [r["K"] for r in rows] == ["1", "2"]


class TestCheck:
    def test_geometry_ships_green(self, capsys):
        code, out, _ = run(capsys, "check", "geometry")
        assert code == EXIT_OK
        lines = out.strip().splitlines()
        assert len(lines) == 5 and all(line.startswith("PASS") for line in lines)

    def test_exit_code_follows_results(self, monkeypatch, capsys):
        monkeypatch.setitem(checks.SUITES, "geometry", lambda seed: [checks.CheckResult("a", 0.0, 1.0), checks.CheckResult("b", 2.0, 1.0)])
        code, out, err = run(capsys, "check", "geometry")
        assert code == EXIT_NUMERIC
        assert out.startswith("PASS a") and "FAIL b" in out
        assert "violated: b" in err

    def test_invariance_passes(self, capsys):
        code, out, _ = run(capsys, "check", "invariance")
        assert code == EXIT_OK and out.startswith("PASS similarity invariance")

    def test_skipping_canonicalization_is_caught(self, monkeypatch, capsys):
        # mutation: every ray keeps the world frame
        monkeypatch.setattr(geo, "canonical_rotation", lambda v, *a: np.broadcast_to(np.eye(3), v.shape[:-1] + (3, 3)).copy())
        code, out, err = run(capsys, "check", "invariance")
        assert code == EXIT_NUMERIC
        assert "FAIL similarity invariance" in out and "violated" in err

    def test_unknown_mode(self, capsys):
        assert run(capsys, "check", "everything")[0] == EXIT_USAGE
