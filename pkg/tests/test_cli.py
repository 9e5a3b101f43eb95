import json
import subprocess
import sys

import numpy as np
import pytest

from camfreepano.cli import main
from camfreepano.geometry import CameraParams, canonical_params
from camfreepano.pano import PanoLayout, build_correspondence, load_cmap
from camfreepano.raster import ImageRaster, psnr, random_warp, read_png, write_png
from camfreepano.synth import smooth_image, smooth_panorama


def tree(path):
    """Every output file's bytes, except the resolved config (it records --out)."""
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "config.resolved.json"}


@pytest.fixture(scope="module")
def pano_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("panos")
    write_png(smooth_panorama(32, seed=1), d / "room.png")
    return d


def test_gen_dataset_counts_and_determinism(tmp_path, pano_dir):
    args = ["gen-dataset", "--src", str(pano_dir), "--n-per-pano", "2", "--view-size", "32", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = tree(tmp_path / "a")
    assert sum(k.endswith(".png") for k in a) == 16
    assert sum(k.endswith(".params.json") for k in a) == 16
    lines = a["manifest.jsonl"].decode().splitlines()
    assert len(lines) == 16
    assert a == tree(tmp_path / "b")
    for k, v in a.items():
        if k.endswith(".params.json"):
            p = json.loads(v)
            assert 60 <= p["fov_deg"] <= 110 and -15 <= p["phi_deg"] <= 15 and -15 <= p["psi_deg"] <= 15
            assert (p["width"], p["height"]) == (32, 32)
    resolved = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert resolved["seed"] == 5 and resolved["n_per_pano"] == 2


def test_gen_dataset_skips_bad_panoramas(tmp_path, pano_dir):
    src = tmp_path / "src"
    src.mkdir()
    (src / "room.png").write_bytes((pano_dir / "room.png").read_bytes())
    write_png(ImageRaster(np.zeros((10, 30, 3))), src / "odd.png")
    assert main(["gen-dataset", "--src", str(src), "--view-size", "32", "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "manifest.jsonl").read_text().splitlines()) == 8


def test_gen_dataset_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["gen-dataset", "--src", str(empty), "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-dataset", "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    assert main(["gen-dataset", "--synthetic", "2", "--n-per-pano", "2", "--view-size", "32",
                 "--out", str(root / "data")]) == 0
    manifest = str(root / "data" / "manifest.jsonl")
    for obj in ("ce", "mse"):
        assert main(["train", "--manifest", manifest, "--objective", obj, "--epochs", "3",
                     "--out", str(root / "models")]) == 0
    return root, manifest


def test_train_and_eval_report(trained):
    root, manifest = trained
    models = root / "models"
    assert (models / "model_ce.cfde").exists() and (models / "model_mse.cfde").exists()
    log = (models / "train_log_ce.jsonl").read_text().splitlines()
    assert json.loads(log[0])["step"] == 0
    out = root / "eval"
    assert main(["eval", "--manifest", manifest, "--model", str(models / "model_ce.cfde"),
                 "--model", str(models / "model_mse.cfde"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["objective"] for r in report["rows"]] == ["ce", "mse"]
    assert report["reference_mae"]["ce"] == {"fov": 7.9, "phi": 1.8, "psi": 1.5}
    assert report["rows"][0]["n"] == 32
    csv_lines = (out / "errors_model_ce.csv").read_text().splitlines()
    assert len(csv_lines) == 33 and csv_lines[0].startswith("index,")
    single = root / "eval1"
    assert main(["eval", "--manifest", manifest, "--model", str(models / "model_ce.cfde"),
                 "--out", str(single)]) == 0
    flat = json.loads((single / "report.json").read_text())
    assert set(flat) >= {"mae_fov", "mae_phi", "mae_psi", "objective", "n"}


def test_eval_errors(tmp_path, trained):
    root, manifest = trained
    (tmp_path / "empty.jsonl").write_text("")
    model = str(root / "models" / "model_ce.cfde")
    assert main(["eval", "--manifest", str(tmp_path / "empty.jsonl"), "--model", model,
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.cfde").write_bytes(b"nope")
    assert main(["eval", "--manifest", manifest, "--model", str(tmp_path / "bad.cfde"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--manifest", str(tmp_path / "missing.jsonl"), "--model", model,
                 "--out", str(tmp_path / "o")]) == 2


def test_train_is_bit_reproducible(tmp_path, trained):
    _, manifest = trained
    for name in ("a", "b"):
        assert main(["train", "--manifest", manifest, "--epochs", "2", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "model_ce.cfde").read_bytes() == (tmp_path / "b" / "model_ce.cfde").read_bytes()


def test_unwarp_identity_and_round_trip(tmp_path):
    canon = smooth_image(64, seed=2)
    write_png(canon, tmp_path / "canon.png")
    canon8 = read_png(tmp_path / "canon.png")
    canonical_params(64).save(tmp_path / "canon.params.json")
    assert main(["unwarp", "--image", str(tmp_path / "canon.png"), "--params", str(tmp_path / "canon.params.json"),
                 "--size", "64", "--out", str(tmp_path / "id")]) == 0
    assert np.array_equal(read_png(tmp_path / "id" / "unwarped.png").data, canon8.data)
    assert not read_png(tmp_path / "id" / "inpaint_mask.png").data.any()

    warped, params = random_warp(canon8, 3)
    write_png(warped, tmp_path / "in.png")
    params.save(tmp_path / "in.params.json")
    assert main(["unwarp", "--image", str(tmp_path / "in.png"), "--params", str(tmp_path / "in.params.json"),
                 "--size", "64", "--reference", str(tmp_path / "canon.png"), "--sweep",
                 "--out", str(tmp_path / "rt")]) == 0
    summary = json.loads((tmp_path / "rt" / "unwarp.json").read_text())
    assert summary["psnr_vs_reference"] >= 30.0
    mask = read_png(tmp_path / "rt" / "inpaint_mask.png").data[:, :, 0]
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert 1.0 - mask.mean() == pytest.approx(summary["valid_fraction"], abs=1e-12)
    sweep = (tmp_path / "rt" / "error_sweep.csv").read_text().splitlines()
    assert sweep[0] == "parameter,error_deg,psnr_db,valid_fraction" and len(sweep) == 1 + 3 * 6
    two_deg = [row for row in sweep if row.startswith("fov,2.0,")]
    assert two_deg and float(two_deg[0].split(",")[2]) < summary["psnr_vs_reference"]


def test_unwarp_feature_grid(tmp_path):
    grid = smooth_image(32, seed=4, channels=6)
    np.save(tmp_path / "grid.npy", grid.data)
    CameraParams(75.0, 5.0, -5.0, 32, 32).save(tmp_path / "p.json")
    assert main(["unwarp", "--features", str(tmp_path / "grid.npy"), "--params", str(tmp_path / "p.json"),
                 "--size", "32", "--out", str(tmp_path / "o")]) == 0
    assert np.load(tmp_path / "o" / "unwarped.npy").shape == (32, 32, 6)


def test_unwarp_with_model(tmp_path, trained):
    root, _ = trained
    write_png(smooth_image(32, seed=9), tmp_path / "in.png")
    assert main(["unwarp", "--image", str(tmp_path / "in.png"), "--model", str(root / "models" / "model_ce.cfde"),
                 "--size", "32", "--out", str(tmp_path / "o")]) == 0
    fov = json.loads((tmp_path / "o" / "unwarp.json").read_text())["params"]["fov_deg"]
    assert 60.0 <= fov <= 110.0


def test_unwarp_errors(tmp_path):
    write_png(smooth_image(32, seed=9), tmp_path / "in.png")
    assert main(["unwarp", "--image", str(tmp_path / "in.png"), "--out", str(tmp_path / "o")]) == 1
    assert main(["unwarp", "--image", str(tmp_path / "in.png"), "--params", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["unwarp", "--image", str(tmp_path / "missing.png"), "--params", "x",
                 "--out", str(tmp_path / "o")]) == 2


def test_correspondences_for_canonical_input(tmp_path):
    canonical_params(32).save(tmp_path / "p.json")
    assert main(["correspondences", "--params", str(tmp_path / "p.json"), "--view-size", "32",
                 "--out", str(tmp_path / "o")]) == 0
    cov = json.loads((tmp_path / "o" / "coverage.json").read_text())
    assert cov["0"]["visible_fraction"] == 1.0
    assert all(cov[k]["visible_fraction"] == 0.0 for k in ("3", "4", "5"))
    assert cov["1"]["visible_fraction"] == pytest.approx(cov["7"]["visible_fraction"], abs=1e-12)
    layout = PanoLayout(view_size=32)
    for view in range(8):
        disk = load_cmap(tmp_path / "o" / f"view_{view}.cmap")
        mem = build_correspondence(canonical_params(32), view, layout)
        assert np.array_equal(disk.visible, mem.visible)
        assert np.array_equal(disk.src_u, mem.src_u.astype(np.float32), equal_nan=True)
    ident = load_cmap(tmp_path / "o" / "view_0.cmap")
    assert np.array_equal(ident.src_u, np.tile(np.arange(32.0), (32, 1)))


def test_slice_and_stitch(tmp_path):
    write_png(smooth_panorama(32, seed=3), tmp_path / "pano.png")
    assert main(["slice", "--pano", str(tmp_path / "pano.png"), "--view-size", "32",
                 "--out", str(tmp_path / "views")]) == 0
    assert len(list((tmp_path / "views").glob("view_*.png"))) == 8
    assert main(["stitch", "--views", str(tmp_path / "views"), "--height", "32",
                 "--out", str(tmp_path / "st")]) == 0
    out = read_png(tmp_path / "st" / "pano.png")
    assert (out.width, out.height) == (64, 32)
    assert psnr(read_png(tmp_path / "pano.png"), out, read_png(tmp_path / "st" / "pano_valid.png").data[:, :, 0] > 0.5) > 25
    write_png(ImageRaster(np.zeros((10, 30, 3))), tmp_path / "odd.png")
    assert main(["slice", "--pano", str(tmp_path / "odd.png"), "--out", str(tmp_path / "x")]) == 2
    assert main(["stitch", "--views", str(tmp_path / "nothing"), "--out", str(tmp_path / "x")]) == 2


def test_verify_and_caa_check(tmp_path):
    assert main(["verify", "--suite", "geometry", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify_geometry.json").read_text())
    assert report["passed"] and len(report["checks"]) == 6
    assert main(["verify", "--suite", "nonsense", "--out", str(tmp_path)]) == 1
    assert main(["caa-check", "--grad-seeds", "2", "--out", str(tmp_path)]) == 0
    caa = json.loads((tmp_path / "verify_caa.json").read_text())
    assert any("central-difference" in c["name"] and c["observed"] <= 1e-4 for c in caa["checks"])


def test_config_file_and_override(tmp_path, pano_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"src": str(pano_dir), "n-per-pano": 1, "view_size": 32, "seed": 9}))
    assert main(["gen-dataset", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert resolved["seed"] == 4 and resolved["view_size"] == 32 and resolved["n_per_pano"] == 1
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert main(["gen-dataset", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["gen-dataset", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 1
    verify_cfg = tmp_path / "verify.json"
    verify_cfg.write_text(json.dumps({"suite": "geometry"}))
    assert main(["verify", "--config", str(verify_cfg), "--out", str(tmp_path / "v")]) == 0


def test_resolved_config_replays_run(tmp_path, pano_dir):
    assert main(["gen-dataset", "--src", str(pano_dir), "--view-size", "32", "--seed", "8",
                 "--out", str(tmp_path / "a")]) == 0
    resolved = tmp_path / "a" / "config.resolved.json"
    assert main(["gen-dataset", "--config", str(resolved), "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert main(["train", "--config", str(resolved), "--out", str(tmp_path / "c")]) == 1


def test_usage_errors():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train"]) == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "camfreepano", "verify", "--suite", "bogus",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 1 and "unknown suite" in res.stderr
