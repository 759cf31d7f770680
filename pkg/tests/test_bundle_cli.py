import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sslc.bundle import (
    BundleError,
    WeightBundle,
    read_calibration,
    read_compressed_bundle,
    write_compressed_bundle,
    write_weight_bundle,
)
from sslc.cli import NormAccumulator, calibrate_bundles, main, parse_synthetic
from sslc.optimizer import loss_of
from sslc.salience import mask_top_count, salience_of
from sslc.synthetic import lognormal_activations, planted

DATA = Path(__file__).parent / "data"


def tree_bytes(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


@pytest.fixture
def model(tmp_path):
    weights = {"block.0.attn": planted(64, 48, 8, seed=1), "block.0.mlp": planted(32, 24, 4, seed=2)}
    biases = {"block.0.mlp": np.linspace(-1, 1, 32)}
    acts = {
        "block.0.attn": lognormal_activations(48, 300, 1.0, 3),
        "block.0.mlp": lognormal_activations(24, 300, 1.0, 4),
    }
    write_weight_bundle(tmp_path / "w", weights, biases)
    write_weight_bundle(tmp_path / "a", acts, kind="activations")
    assert main(["calibrate", str(tmp_path / "a"), "--out", str(tmp_path / "c"), "--chunk-rows", "64"]) == 0
    return tmp_path, weights, biases, acts


def compress_args(tmp, out, *extra):
    return ["compress", str(tmp / "w"), str(tmp / "c"), "--out", str(tmp / out),
            "--rank", "4", "--iters", "8", "--seed", "3", *extra]


def test_weight_bundle_roundtrip(tmp_path, rng):
    w = rng.standard_normal((5, 7))
    write_weight_bundle(tmp_path, {"x/y": w}, {"x/y": np.ones(5)})
    b = WeightBundle.open(tmp_path)
    assert b.names() == ["x/y"]
    assert np.array_equal(b.load("x/y"), w.astype(np.float32).astype(np.float64))
    assert np.array_equal(b.load_bias("x/y"), np.ones(5))
    chunks = list(b.iter_row_chunks("x/y", 2))
    assert [c.shape[0] for c in chunks] == [2, 2, 1]
    assert np.array_equal(np.vstack(chunks), b.load("x/y"))


def test_truncated_blob_rejected(tmp_path, rng):
    write_weight_bundle(tmp_path, {"t": rng.standard_normal((4, 4))})
    blob = next(p for p in tmp_path.iterdir() if p.suffix == ".f32")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(BundleError):
        WeightBundle.open(tmp_path)


def test_calibration_matches_direct_norms(model):
    tmp, _, _, acts = model
    calib = read_calibration(tmp / "c")
    for name, x in acts.items():
        direct = np.linalg.norm(x.astype(np.float32).astype(np.float64), axis=0)
        assert np.allclose(calib[name].norms, direct, rtol=1e-6)
        assert calib[name].samples == 300


def test_streaming_matches_single_batch(tmp_path, rng):
    x = lognormal_activations(16, 500, 2.0, 0)
    write_weight_bundle(tmp_path / "all", {"t": x}, kind="activations")
    write_weight_bundle(tmp_path / "p1", {"t": x[:230]}, kind="activations")
    write_weight_bundle(tmp_path / "p2", {"t": x[230:]}, kind="activations")
    single = calibrate_bundles([tmp_path / "all"], chunk_rows=10_000)[0]
    streamed = calibrate_bundles([tmp_path / "p1", tmp_path / "p2"], chunk_rows=37)[0]
    assert streamed.samples == single.samples == 500
    assert np.max(np.abs(streamed.norms - single.norms) / single.norms) <= 1e-7


def test_non_finite_activation_names_channel():
    acc = NormAccumulator(3)
    block = np.ones((2, 3))
    block[1, 2] = np.nan
    with pytest.raises(ValueError, match="channel 2"):
        acc.update(block)


def test_synthetic_calibration_is_deterministic(tmp_path):
    spec = "lognormal:sigma=2,seed=5,channels=32,samples=1000"
    for out in ("s1", "s2"):
        assert main(["calibrate", "--synthetic", spec, "--name", "t", "--out", str(tmp_path / out)]) == 0
    assert tree_bytes(tmp_path / "s1") == tree_bytes(tmp_path / "s2")
    assert parse_synthetic(spec)["channels"] == 32
    with pytest.raises(ValueError):
        parse_synthetic("gaussian:channels=3,samples=2")


def test_compress_is_byte_deterministic(model):
    tmp = model[0]
    assert main(compress_args(tmp, "o1")) == 0
    assert main(compress_args(tmp, "o2")) == 0
    assert tree_bytes(tmp / "o1") == tree_bytes(tmp / "o2")


def test_save_load_save_is_byte_identical(model):
    tmp, weights, biases, _ = model
    assert main(compress_args(tmp, "o1")) == 0
    layers, manifest = read_compressed_bundle(tmp / "o1")
    seeds = {r["name"]: r["seed"] for r in manifest["tensors"]}
    write_compressed_bundle(tmp / "o2", layers, seeds, manifest["provenance"])
    assert tree_bytes(tmp / "o1") == tree_bytes(tmp / "o2")
    assert np.array_equal(layers["block.0.mlp"].bias, biases["block.0.mlp"].astype(np.float32))
    assert layers["block.0.attn"].bias is None


def test_loaded_layers_equal_f32_cast(model, tmp_path):
    tmp, weights, _, _ = model
    calib = read_calibration(tmp / "c")
    assert main(compress_args(tmp, "o1")) == 0
    layers, manifest = read_compressed_bundle(tmp / "o1")
    for rec in manifest["tensors"]:
        layer = layers[rec["name"]]
        for arr in (layer.s.values, layer.factors.u, layer.factors.v):
            assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))
        w = WeightBundle.open(tmp / "w").load(rec["name"])
        recomputed = loss_of(w, layer.s, layer.factors, calib[rec["name"]].scaling(1e-8))
        stored = rec["final_losses"]["scaled_loss"]
        assert abs(recomputed - stored) <= 1e-5 * stored
        assert rec["nnz"] == layer.s.nnz and rec["rank"] == 4


def test_rank_zero_cli_equals_pruning(model):
    tmp, _, _, _ = model
    assert main(compress_args(tmp, "o", "--rank", "0")) == 0
    layers, _ = read_compressed_bundle(tmp / "o")
    calib = read_calibration(tmp / "c")
    b = WeightBundle.open(tmp / "w")
    for name, layer in layers.items():
        w = b.load(name)
        m, n = w.shape
        keep = mask_top_count(salience_of(w, calib[name].scaling(1e-8)), int(0.5 * m * n)).keep
        assert layer.rank == 0
        assert np.array_equal(layer.s.to_dense(), np.where(keep, w, 0.0).astype(np.float32))


def test_zero_iterations_cli(model):
    tmp = model[0]
    assert main(compress_args(tmp, "o", "--iters", "0")) == 0
    _, manifest = read_compressed_bundle(tmp / "o")
    for rec in manifest["tensors"]:
        assert rec["iterations"] == 0 and rec["rank"] == 0
        assert rec["final_losses"]["scaled_loss"] == rec["final_losses"]["one_shot_loss"]


def test_report_outputs(model, capsys):
    tmp = model[0]
    assert main(compress_args(tmp, "o")) == 0
    args = ["report", str(tmp / "o"), str(tmp / "w"), str(tmp / "c"),
            "--cost-calibration", str(DATA / "accelerator_cycles.json")]
    assert main(args + ["--format", "json", "--out", str(tmp / "r.json"),
                        "--eval-activations", str(tmp / "a")]) == 0
    report = json.loads((tmp / "r.json").read_text())
    speedups = [e["speedup"] for e in report["cost_calibration"]]
    assert all(abs(a - b) < 0.01 for a, b in zip(speedups, [1.74, 1.84, 1.63, 1.85]))
    assert main(args + ["--format", "csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["tensor", "section", "index", "metric", "value"]
    sections = {r[1] for r in rows[1:]}
    assert {"summary", "trace", "budget", "retention", "cost", "cost_calibration"} <= sections


def test_exit_codes(model, tmp_path):
    tmp = model[0]
    # rank too large for the budget
    assert main(compress_args(tmp, "bad", "--rank", "40")) == 2
    # calibration that does not match the weights
    write_weight_bundle(tmp / "a2", {"block.0.attn": np.ones((10, 5))}, kind="activations")
    assert main(["calibrate", str(tmp / "a2"), "--out", str(tmp / "c2")]) == 0
    assert main(["compress", str(tmp / "w"), str(tmp / "c2"), "--out", str(tmp / "x")]) == 2
    # missing bundle directory
    assert main(["inspect", str(tmp_path / "nope")]) == 4
    # non-finite activations are a validation error
    bad = np.ones((4, 3))
    bad[2, 1] = np.inf
    write_weight_bundle(tmp / "a3", {"t": bad}, kind="activations")
    assert main(["calibrate", str(tmp / "a3"), "--out", str(tmp / "c3")]) == 2


def test_sweep_outputs(model):
    tmp = model[0]
    args = ["sweep", str(tmp / "w"), str(tmp / "c"), "--out-dir", str(tmp / "sw"),
            "--rank-list", "2,4,40", "--iters-list", "5", "--seed-list", "0,1,2"]
    assert main(args) == 0
    runs = list(csv.DictReader(open(tmp / "sw" / "runs.csv")))
    summary = list(csv.DictReader(open(tmp / "sw" / "summary.csv")))
    assert len(runs) == 2 * 3 * 3
    assert sum(r["status"] == "ok" for r in runs) == 2 * 2 * 3
    assert len(summary) == 4
    for row in summary:
        assert int(row["runs"]) == 3 and float(row["loss_std"]) >= 0


def test_inspect_prints_manifest(model, capsys):
    tmp = model[0]
    assert main(["inspect", str(tmp / "c")]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "calibration"
