import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import exact_pair
from threshfit.cli import DEFAULT_GRID, build_parser, main
from threshfit.formats import MatchFile, MatchPair, read_manifest, read_table, save_matches
from threshfit.synthetic import generate_scene, scene_suite

FAST = ["--ransac-iters", "60", "--refit-rounds", "2"]


@pytest.fixture(scope="module")
def match_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "pairs.jsonl"
    pairs = [MatchPair(f"s{i}", sc.matches, sc.gt_pose)
             for i, sc in enumerate(generate_scene(s) for s in scene_suite(3, seed=6))]
    save_matches(MatchFile(pairs), path)
    return path


def test_synthbench_defaults_match_the_benchmark_protocol():
    args = build_parser().parse_args(["synthbench", "--out", "x"])
    assert args.sigma == 1.0 and args.scenes == 200
    assert args.methods == ["fixed", "simfit", "simfitpp", "simfitpp-multi"]
    assert tuple(args.tau0_grid) == DEFAULT_GRID == (0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0)
    assert (args.alpha, args.tau_min, args.tau_max, args.p_train, args.ftol,
            args.max_iters) == (0.99, 0.25, 8.0, 0.5, 0.01, 4)
    assert args.confidence is None and args.ransac_iters == 500


def test_synthbench_grid_of_cells(tmp_path):
    out = tmp_path / "sb"
    assert main(["synthbench", "--scenes", "2", "--out", str(out), *FAST]) == 0
    schema, cells = read_table(out / "summary.csv")
    assert schema == "threshfit.summary/1"
    assert len(cells) == 4 * 7
    assert {(c["method"], float(c["tau0"])) for c in cells} == {
        (m, t) for m in ("fixed", "simfit", "simfitpp", "simfitpp-multi") for t in DEFAULT_GRID}
    schema, rows = read_table(out / "results.csv")
    assert schema == "threshfit.results/1" and len(rows) == 2 * 28
    man = read_manifest(out / "manifest.txt")
    for key in ("config.alpha", "config.tau_min", "config.tau_max", "config.p_train",
                "config.ftol", "config.max_outer_iters", "config.fixedpoint_iters",
                "config.ransac_iterations", "config.confidence", "config.seed",
                "tau0_grid", "methods", "scenes", "sigma", "schema"):
        assert key in man
    assert man["schema"] == "threshfit.manifest/1"


def test_estimate_writes_rows(tmp_path, match_file):
    out = tmp_path / "e"
    assert main(["estimate", str(match_file), "--out", str(out), "--tau0", "2", *FAST]) == 0
    _, rows = read_table(out / "results.csv")
    assert [r["pair_id"] for r in rows] == ["s0", "s1", "s2"]
    assert all(r["method"] == "simfitpp" and r["error"] == "null" for r in rows)
    assert all(float(r["rot_err_deg"]) < 5 for r in rows)
    man = read_manifest(out / "manifest.txt")
    assert man["config.tau0"] == "2.0" and len(man["input_sha256"]) == 64


def test_estimate_essential(tmp_path, match_file):
    assert main(["estimate", str(match_file), "--out", str(tmp_path), "--model", "E",
                 "--method", "fixed", "--tau0", "2", *FAST]) == 0
    _, rows = read_table(tmp_path / "results.csv")
    assert all(r["error"] == "null" for r in rows)


def test_estimate_six_matches_is_data_error(tmp_path, rng):
    m, *_ = exact_pair(rng, 6)
    path = tmp_path / "six.jsonl"
    save_matches(MatchFile([MatchPair("six", m)]), path)
    assert main(["estimate", str(path), "--out", str(tmp_path / "o")]) == 2
    assert main(["estimate", str(path), "--out", str(tmp_path / "o"), "--strict"]) == 2


def test_essential_needs_intrinsics(tmp_path, rng):
    m, *_ = exact_pair(rng, 30)
    path = tmp_path / "raw.jsonl"
    save_matches(MatchFile([MatchPair("raw", type(m)(m.pts_a, m.pts_b))]), path)
    assert main(["estimate", str(path), "--out", str(tmp_path / "o"), "--model", "E"]) == 2


def test_all_pairs_failing_exits_3(tmp_path, rng):
    path = tmp_path / "small.jsonl"
    pairs = [MatchPair(f"p{i}", exact_pair(rng, 15)[0]) for i in range(2)]
    save_matches(MatchFile(pairs), path)
    assert main(["estimate", str(path), "--out", str(tmp_path / "o")]) == 3
    _, rows = read_table(tmp_path / "o" / "results.csv")
    assert all(r["error"].startswith("InsufficientDataError") for r in rows)
    assert main(["multi", str(path), "--out", str(tmp_path / "m")]) == 3


def test_partial_failure_exits_0(tmp_path, rng, match_file):
    path = tmp_path / "mixed.jsonl"
    text = match_file.read_text(encoding="utf-8").splitlines()[:2]
    small = exact_pair(rng, 15)[0]
    rec = {"id": "tiny", "pts_a": small.pts_a.tolist(), "pts_b": small.pts_b.tolist()}
    path.write_text("\n".join(text + [json.dumps(rec)]) + "\n", encoding="utf-8")
    assert main(["estimate", str(path), "--out", str(tmp_path / "o"), *FAST]) == 0
    _, rows = read_table(tmp_path / "o" / "results.csv")
    assert [r["error"] == "null" for r in rows] == [True, False]


def test_lenient_and_strict_invalid_pairs(tmp_path, match_file):
    path = tmp_path / "bad.jsonl"
    lines = match_file.read_text(encoding="utf-8").splitlines()
    bad = json.loads(lines[1])
    bad["id"] = "short"
    bad["pts_b"] = bad["pts_b"][:-1]
    path.write_text("\n".join(lines[:2] + [json.dumps(bad)]) + "\n", encoding="utf-8")
    assert main(["estimate", str(path), "--out", str(tmp_path / "o"), "--method", "fixed",
                 *FAST]) == 0
    assert read_manifest(tmp_path / "o" / "manifest.txt")["rejected_pairs"] == "1"
    assert main(["estimate", str(path), "--out", str(tmp_path / "o"), "--strict"]) == 2


def test_multi(tmp_path, match_file):
    out = tmp_path / "m"
    assert main(["multi", str(match_file), "--out", str(out), "--tau0", "3", *FAST]) == 0
    schema, rows = read_table(out / "multi.csv")
    assert schema == "threshfit.multi/1"
    assert rows[0]["pairs"] == "3" and 0.25 <= float(rows[0]["tau_star"]) <= 8


def test_sweep(tmp_path, match_file):
    out = tmp_path / "sw"
    assert main(["sweep", str(match_file), "--out", str(out), "--methods", "fixed,simfitpp",
                 "--tau0-grid", "1,3", *FAST]) == 0
    _, cells = read_table(out / "summary.csv")
    assert [(c["method"], c["tau0"]) for c in cells] == [
        ("fixed", "1.0"), ("fixed", "3.0"), ("simfitpp", "1.0"), ("simfitpp", "3.0")]
    assert all(c["auc10"] != "null" for c in cells)


def test_histfit_synthetic(tmp_path):
    out = tmp_path / "h"
    assert main(["histfit", "--out", str(out)]) == 0
    schema, fit = read_table(out / "histfit_fit.csv")
    assert schema == "threshfit.histfit/1"
    assert float(fit[0]["ks_pvalue"]) > 0.01
    assert int(fit[0]["n"]) == 10_000
    assert float(fit[0]["sigma_hat"]) == pytest.approx(1.0, rel=0.05)
    _, bins = read_table(out / "histfit_bins.csv")
    assert len(bins) == 40
    # observed and chi2 densities agree in the bulk
    dens = np.array([[float(b["density"]), float(b["chi2_density"])] for b in bins[:10]])
    np.testing.assert_allclose(dens[:, 0], dens[:, 1], rtol=0.2)


def test_histfit_file(tmp_path, match_file):
    assert main(["histfit", "--matches", str(match_file), "--out", str(tmp_path), *FAST]) == 0
    _, fit = read_table(tmp_path / "histfit_fit.csv")
    assert fit[0]["tau"] == "1.0"


@pytest.mark.parametrize("argv", [
    ["estimate"],
    ["estimate", "x.jsonl"],
    ["nosuch"],
    ["sweep", "x.jsonl", "--out", "o", "--methods", "magsac"],
    ["synthbench", "--out", "o", "--tau0", "9"],
    ["synthbench", "--out", "o", "--tau0-grid", "0.1,1"],
    ["synthbench", "--out", "o", "--scenes", "1", "--n-points", "3"],
    ["estimate", "x.jsonl", "--out", "o", "--model", "H"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        sys.exit(main(argv))
    assert info.value.code == 1


def test_missing_and_malformed_files_exit_2(tmp_path):
    assert main(["estimate", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n", encoding="utf-8")
    assert main(["multi", str(bad), "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "threshfit", "estimate",
                           str(tmp_path / "none.jsonl"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "data error" in proc.stderr


def test_rerun_is_byte_identical(tmp_path, match_file):
    for d in ("a", "b"):
        assert main(["sweep", str(match_file), "--out", str(tmp_path / d), "--methods",
                     "simfit,simfitpp-multi", "--tau0-grid", "2", *FAST]) == 0
    for name in ("results.csv", "summary.csv", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
