import csv
import json
from pathlib import Path

import pytest

from ringform import cli
from ringform.config import ConfigError, grid, parse_config

ROOT = Path(__file__).resolve().parents[1]
FACT_MODEL = {"alpha1": 0.5, "alpha2": 2.5, "alpha3": 0.5}
WEIGHTS = {"gamma_s": 0.01, "gamma_v": 0.05, "gamma_u": 0.1}


def write(tmp_path, doc, name="cfg.json"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run_cli(tmp_path, command, doc, *extra):
    out = tmp_path / "out"
    code = cli.main([command, "--config", write(tmp_path, doc), "--out", str(out), *extra])
    return code, out


# --- config -------------------------------------------------------------------

def test_grid_forms():
    assert grid("x", 2) == (2.0,)
    assert grid("x", [1, 2]) == (1.0, 2.0)
    assert grid("x", {"start": 0.1, "stop": 0.5, "step": 0.2}) == (0.1, 0.3, 0.5)
    with pytest.raises(ConfigError, match="x"):
        grid("x", {"start": 1, "stop": 0, "step": 1})


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"n": 12, "model": {"alpha1": 0.5, "alpha2": 0.4, "alpha3": 0.5}}, "LinearHdvCoeffs"),
        ({"n": 1, "model": FACT_MODEL}, "n:"),
        ({"n": 12, "model": FACT_MODEL, "eig": {"k": [13]}}, "eig.k"),
        ({"n": 12, "model": FACT_MODEL, "eig": {"trails": 3}}, "unknown field"),
        ({"n": 12, "model": {"ovm": {"alpha": 0.6, "beta": 0.9}, "s_star": 40}}, "degenerate"),
        ({"n": 12}, "model"),
        ({"n": 12, "model": FACT_MODEL, "seed": -1}, "seed"),
        ({"n": 12, "model": FACT_MODEL, "kind": "sim"}, "kind"),
    ],
)
def test_config_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(doc, kind="eig")


def test_cooperative_cost_needs_input_weight():
    doc = {"n": 12, "model": FACT_MODEL, "weights": {"gamma_s": 0.01, "gamma_v": 0.05},
           "synth": {"formations": [[1]]}}
    with pytest.raises(ConfigError, match="gamma_u"):
        parse_config(doc, kind="synth")


def test_overrides_and_defaults():
    cfg = parse_config({"n": 12, "model": FACT_MODEL, "seed": 5}, kind="eig", seed=9, threads=3)
    assert (cfg.seed, cfg.threads) == (9, 3)
    assert cfg.to_dict()["seed"] == 9
    sim = parse_config({"seed": 4, "sim": {}}, kind="sim")
    assert sim.sim.scenario.rng_seed == 4


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    doc = json.loads(path.read_text())
    parse_config(doc)


# --- commands -----------------------------------------------------------------

EIG = {"n": 10, "model": {"alpha1": 0.94, "alpha2": 1.5, "alpha3": 0.9}, "gains": {"ks": 0.1, "kv": 1.0},
       "eig": {"k": [0, 3], "trials": 5}}


def test_eig_outputs_and_sidecars(tmp_path, capsys):
    code, out = run_cli(tmp_path, "eig", EIG, "--seed", "11")
    assert code == 0
    rows = read_csv(out / "eig_spectrum.csv")
    assert list(rows[0]) == ["k", "trial", "formation", "re", "im"]
    assert sum(r["k"] == "0" for r in rows) == 20  # a single k=0 spectrum
    summary = read_csv(out / "eig_summary.csv")
    assert [r["verdict"] for r in summary] == ["invariant", "invariant"]
    meta = json.loads((out / "eig_spectrum.meta.json").read_text())
    assert meta["config"]["seed"] == 11 and meta["version"] and meta["wall_time_s"] >= 0
    assert "invariant" in capsys.readouterr().out


def test_numbers_have_twelve_significant_digits(tmp_path):
    _, out = run_cli(tmp_path, "eig", EIG)
    re_vals = [r["re"] for r in read_csv(out / "eig_spectrum.csv")]
    digits = max(len(v.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) for v in re_vals)
    assert digits == 12


def test_commands_are_deterministic(tmp_path):
    doc = {"n": 8, "model": FACT_MODEL, "weights": WEIGHTS, "submod": {"trials": 3}}
    _, a = run_cli(tmp_path / "a", "submod", doc)
    _, b = run_cli(tmp_path / "b", "submod", doc)
    assert (a / "submod_chains.csv").read_text() == (b / "submod_chains.csv").read_text()


def test_submod_single_chain_and_pair(tmp_path):
    doc = {"n": 12, "model": FACT_MODEL, "weights": WEIGHTS, "seed": 2,
           "submod": {"trials": 1, "pairs": [{"e": 1, "small": [4, 9, 10], "large": [2, 3, 4, 9, 10]}]}}
    code, out = run_cli(tmp_path, "submod", doc)
    assert code == 0
    chains = read_csv(out / "submod_chains.csv")
    assert list(chains[0]) == ["chain_id", "i", "margin"] and len(chains) == 11
    pair = read_csv(out / "submod_pairs.csv")[0]
    assert pair["violated"] == "1"
    meta = json.loads((out / "submod_chains.meta.json").read_text())
    assert meta["verdict"] in ("counterexample found", "no counterexample in 1 trials")


def test_search_point_and_scale(tmp_path):
    doc = {"n": 8, "weights": WEIGHTS,
           "search": {"k": [2], "alpha": [0.6], "beta": [0.9], "s_star": [20]}}
    code, out = run_cli(tmp_path, "search", doc)
    assert code == 0
    row = read_csv(out / "search.csv")[0]
    assert row["best_class"] == "uniform" and float(row["xi"]) < 0
    assert len(read_csv(out / "search_ranking.csv")) == 4
    scale = {"model": {"ovm": {"alpha": 0.6, "beta": 0.9}, "s_star": 20}, "weights": WEIGHTS,
             "search": {"mode": "scale", "k": [4], "n_values": [8, 16]}}
    code, out = run_cli(tmp_path / "s", "search", scale)
    gaps = [float(r["gap"]) for r in read_csv(out / "search_scale.csv")]
    assert code == 0 and 0 < gaps[0] < gaps[1]


def test_search_sweep_skips_degenerate_cells(tmp_path):
    doc = {"n": 6, "weights": WEIGHTS,
           "search": {"mode": "sweep", "k": [2], "alpha": [0.6], "beta": [0.9], "s_star": [3, 20]}}
    code, out = run_cli(tmp_path, "search", doc)
    assert code == 0 and len(read_csv(out / "search.csv")) == 1
    meta = json.loads((out / "search.meta.json").read_text())
    assert meta["skipped_cells"][0]["s_star"] == 3


def test_synth_gain_file(tmp_path):
    doc = {"n": 6, "model": FACT_MODEL, "weights": WEIGHTS,
           "synth": {"formations": [[1, 4]], "cross_check": False, "perturbation_trials": 3}}
    code, out = run_cli(tmp_path, "synth", doc)
    assert code == 0
    with open(out / "gain_1.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3 and len(rows[0]) == 12
    summary = read_csv(out / "synth.csv")[0]
    assert summary["status"] == "converged" and float(summary["rotation_gap"]) < 1e-9


def test_synth_failure_exits_numerical(tmp_path, monkeypatch):
    import ringform.perf as perf

    orig = perf._riccati
    monkeypatch.setattr(perf, "_riccati", lambda red, Q, R: (lambda K, h, i: (K, 3 * h, i))(*orig(red, Q, R)))
    doc = {"n": 6, "model": FACT_MODEL, "weights": WEIGHTS,
           "synth": {"formations": [[1]], "cross_check": False}}
    code, _ = run_cli(tmp_path, "synth", doc)
    assert code == 3


def test_sim_zero_perturbation(tmp_path):
    doc = {"sim": {"scenario": {"perturbation": None, "horizon": 10}, "stride": 100}}
    code, out = run_cli(tmp_path, "sim", doc)
    assert code == 0
    m = read_csv(out / "metrics_run.csv")[0]
    assert float(m["lq_cost"]) == pytest.approx(0, abs=1e-12) and float(m["stabilizing_time"]) == 0
    assert (out / "trace_run.meta.json").exists()


def test_sim_collision_exits_four(tmp_path):
    doc = {"sim": {"scenario": {"formation": [1, 2, 3, 4, 5, 6, 7, 8],
                                "perturbation": {"vehicle": 20, "start": 1, "accel": 8, "duration": 10}},
                   "sweep": False}}
    code, out = run_cli(tmp_path, "sim", doc)
    assert code == 4
    meta = json.loads((out / "trace_run.meta.json").read_text())
    assert "collision" in meta["aborted"]


def test_validation_exit_code(tmp_path, capsys):
    bad = dict(EIG, model={"alpha1": 0.94, "alpha2": 0.5, "alpha3": 0.9})
    code, _ = run_cli(tmp_path, "eig", bad)
    assert code == 2
    assert "LinearHdvCoeffs" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["eig", "--config", str(tmp_path / "none.json")]) == 2
