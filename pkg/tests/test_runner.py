import configparser
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spatialvb import cli
from spatialvb import config as cfgmod
from spatialvb import pipeline
from spatialvb.config import ConfigError, ExperimentConfig

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    model = draw(st.sampled_from(["full", "basis"]))
    return ExperimentConfig(
        model=model,
        kind=draw(st.sampled_from(["gaussian", "poisson", "bernoulli"])),
        fitter=draw(st.sampled_from(cfgmod.MODEL_FITTERS[model])),
        seed=draw(st.integers(0, 2**63 - 1)),
        output=draw(st.text("abcxyz/_-", min_size=1, max_size=12)),
        n=draw(st.integers(2, 10_000)),
        train_fraction=draw(st.floats(0.05, 0.95)),
        beta=tuple(draw(st.lists(finite, min_size=1, max_size=4))),
        phi=draw(st.floats(1e-3, 1.4)),
        tau2=draw(st.floats(0, 10)),
        m=draw(st.integers(1, 200)),
        basis_on_all_locations=draw(st.booleans()),
        epsilon_star=draw(st.floats(1e-12, 1.0)),
        weight_mode=draw(st.sampled_from(["softmax", "literal"])),
        volume_correction=draw(st.booleans()),
        joint=draw(st.booleans()),
        sigma2_bounds=draw(st.sampled_from(["fixed", "auto"])),
        iterations=draw(st.integers(0, 10**6)),
    )


@given(configs())
def test_config_round_trip(cfg):
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_config_file_is_sectioned_key_value(tmp_path):
    path = tmp_path / "exp.ini"
    cfgmod.save(ExperimentConfig(n=123), path)
    cp = configparser.ConfigParser()
    cp.read(path)
    assert set(cp.sections()) == set(cfgmod.SECTIONS)
    assert cp["data"]["n"] == "123"
    assert cfgmod.load(path).n == 123


def test_incompatible_fitter_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(model="full", fitter="mfvb").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"model": "basis"})
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"no_such_key": "1"})


def test_parse_assignments():
    assert cfgmod.parse_assignments("n=2000,m=20, phi=0.5") == {"n": "2000", "m": "20", "phi": "0.5"}
    cfg = ExperimentConfig().with_overrides({"beta": "1;-2.5"})
    assert cfg.beta == (1.0, -2.5)
    with pytest.raises(ConfigError):
        cfgmod.parse_assignments("n2000")


def test_usage_error_before_compute(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["fit", "--model", "full", "--fitter", "mfvb", "-o", str(tmp_path / "x")])
    assert err.value.code == 2
    assert not (tmp_path / "x").exists()


SMALL = ["--set", "grid_phi_size=4", "--set", "draws=300"]


def test_fit_smoke_basis_poisson(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["fit", "--model", "basis", "--kind", "poisson", "--fitter", "mfvb",
                     "--simulate", "n=2000,m=20,phi=0.5", "-o", str(out)])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"fit_summary.csv", "eta_summary.csv", "scores.csv", "elbo_trace.csv", "manifest.txt"} <= names
    man = pipeline.read_manifest(out / "manifest.txt")
    assert man["status"]["status"] == "ok"
    assert man["basis"]["m"] == "20" and man["status"]["basis_m"] == "20"
    header, rows = pipeline.read_csv(out / "fit_summary.csv")
    assert header[:3] == ["parameter", "mean", "sd"]
    assert [r[0] for r in rows][:3] == ["beta1", "beta2", "sigma2"]


def test_infvb_run_writes_weights(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["fit", "--kind", "bernoulli", "--fitter", "infvb-phi", "--simulate", "n=80",
                     "-o", str(out), *SMALL]) == 0
    header, rows = pipeline.read_csv(out / "weights.csv")
    assert "weight" in header and len(rows) == 4
    w = np.array([float(r[header.index("weight")]) for r in rows])
    assert abs(w.sum() - 1) < 1e-12


def test_same_config_gives_identical_scores(tmp_path):
    args = ["fit", "--kind", "bernoulli", "--fitter", "infvb-phi", "--simulate", "n=80", *SMALL]
    assert cli.main([*args, "-o", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "-o", str(tmp_path / "b"), "--workers", "4"]) == 0
    assert (tmp_path / "a" / "scores.csv").read_bytes() == (tmp_path / "b" / "scores.csv").read_bytes()
    for name in ("eta_summary.csv", "fit_summary.csv", "weights.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_written_on_failure(tmp_path):
    out = tmp_path / "bad"
    code = cli.main(["fit", "--kind", "gaussian", "--csv", str(tmp_path / "missing.csv"), "-o", str(out)])
    assert code == 1
    man = pipeline.read_manifest(out / "manifest.txt")
    assert man["status"]["status"] == "failed"
    assert "missing.csv" in man["status"]["error"]


def test_simulate_predict_score_round_trip(tmp_path):
    data = tmp_path / "d.csv"
    assert cli.main(["simulate", "--kind", "poisson", "--simulate", "n=60", "-o", str(data)]) == 0
    run = tmp_path / "run"
    assert cli.main(["fit", "--kind", "poisson", "--fitter", "infvb-phi", "--csv", str(data), "-o", str(run),
                     *SMALL]) == 0
    assert cli.main(["predict", "--run", str(run)]) == 0
    header, rows = pipeline.read_csv(run / "predictions.csv")
    eta_header, eta_rows = pipeline.read_csv(run / "eta_summary.csv")
    assert len(rows) == len(eta_rows)
    assert cli.main(["score", "--run", str(run)]) == 0
    rescored = pipeline.read_csv(run / "rescored.csv")
    original = pipeline.read_csv(run / "scores.csv")
    h = original[0]
    assert float(rescored[1][0][rescored[0].index("rmspe")]) == float(original[1][0][h.index("rmspe")])


def test_predict_at_new_locations(tmp_path):
    run = tmp_path / "run"
    assert cli.main(["fit", "--model", "basis", "--kind", "bernoulli", "--simulate", "n=100,m=8", "-o", str(run),
                     "--set", "draws=200"]) == 0
    locs = tmp_path / "locs.csv"
    locs.write_text("x,y,x1,x2\n0.5,0.5,1,0.1\n0.2,0.9,1,-0.3\n")
    out = tmp_path / "new.csv"
    assert cli.main(["predict", "--run", str(run), "--locations", str(locs), "-o", str(out)]) == 0
    header, rows = pipeline.read_csv(out)
    assert header == ["index", "mean", "sd", "q025", "q975"] and len(rows) == 2
    s = pipeline.predict_run(run, np.array([[0.5, 0.5], [0.2, 0.9]]), np.array([[1.0, 0.1], [1.0, -0.3]]))
    np.testing.assert_allclose(s.mean, [float(r[1]) for r in rows], rtol=1e-12)


def test_compare_side_by_side(tmp_path):
    out = tmp_path / "cmp"
    code = cli.main(["compare", "--model", "basis", "--kind", "bernoulli", "--fitters", "mfvb,mcmc",
                     "--simulate", "n=150,m=10", "--set", "iterations=2000", "--set", "draws=200",
                     "-o", str(out)])
    assert code == 0
    header, rows = pipeline.read_csv(out / "compare_scores.csv")
    assert [r[0] for r in rows] == ["mfvb", "mcmc"]
    header, rows = pipeline.read_csv(out / "compare_parameters.csv")
    assert header == ["parameter", "mean_mfvb", "mean_mcmc", "diff_mcmc"]
    beta1 = rows[0]
    assert float(beta1[3]) == pytest.approx(float(beta1[2]) - float(beta1[1]), abs=1e-12)


def test_single_scenario_table(tmp_path):
    sc = [pipeline.Scenario("full", "bernoulli", 0.5, 60)]
    base = ExperimentConfig(draws=200)
    res = pipeline.run_table_reproduction("desk", sc, replicates=2, output=tmp_path / "t", mcmc_iterations=500,
                                          base=replace(base, grid_phi_size=4))
    assert len(res.rows) == 1
    row = res.rows[0]
    assert {"mcmc", "mcmc_wall", "infvb-phi", "infvb-phi_wall", "infvb-phi_speedup"} <= set(row)
    header, rows = pipeline.read_csv(tmp_path / "t" / "table.csv")
    assert len(rows) == 1
    assert len(pipeline.read_csv(tmp_path / "t" / "replicates.csv")[1]) == 2


def test_scenario_failure_is_recorded(tmp_path):
    sc = [pipeline.Scenario("full", "bernoulli", 0.5, 1), pipeline.Scenario("full", "bernoulli", 0.5, 40)]
    res = pipeline.run_table_reproduction("desk", sc, replicates=1, mcmc_iterations=200,
                                          base=ExperimentConfig(draws=100, grid_phi_size=3))
    assert len(res.rows) == 2
    assert any(f[0] == 0 for f in res.failures)
    assert not any(f[0] == 1 for f in res.failures)
    assert np.isfinite(res.rows[1]["mcmc"])
