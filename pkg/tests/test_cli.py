import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from nvsinglet import cli
from nvsinglet.fit import dataset_from_csv, dataset_to_csv
from nvsinglet.sequence import curve_from_csv, curve_to_csv


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows_of(text):
    return list(csv.reader(io.StringIO(text)))


# --- grid parsing ---------------------------------------------------------------------------

def test_parse_grid():
    np.testing.assert_allclose(cli.parse_grid("0:50:6").values(), [0, 10, 20, 30, 40, 50])
    np.testing.assert_allclose(cli.parse_grid("1:100:3:log").values(), [1, 10, 100])
    assert cli.parse_grid("0:0:1").values().tolist() == [0.0]


@pytest.mark.parametrize("text", ["0:50", "0:50:0", "-1:5:3", "5:1:3", "0:10:3:log", "a:b:c", "0:1:2:lin"])
def test_parse_grid_rejects(text):
    with pytest.raises(cli.InputError):
        cli.parse_grid(text)


# --- simulate ---------------------------------------------------------------------------------

def test_simulate_rows_conserve(capsys):
    code, out, _ = run(capsys, "simulate")
    assert code == 0
    rows = rows_of(out)
    assert rows[0] == ["stage", "label", "duration_ns", "g0", "g1", "e0", "e1", "s_e", "s_g",
                       "nv0_g", "nv0_e", "emission"]
    assert len(rows) == 8
    for r in rows[1:]:
        assert abs(sum(float(x) for x in r[3:11]) - 1.0) <= 1e-8  # 9 printed digits per entry
    assert float(rows[-1][-1]) > 0 and all(float(r[-1]) == 0 for r in rows[1:-1])


def test_simulate_pi_changes_rows_from_the_pi_stage(capsys):
    _, with_pi, _ = run(capsys, "simulate", "--with-pi")
    _, without, _ = run(capsys, "simulate", "--no-pi")
    a, b = rows_of(with_pi)[1:], rows_of(without)[1:]
    first = next(k for k, (x, y) in enumerate(zip(a, b)) if x != y)
    assert a[first][1] == "pi"


def test_simulate_singlet_at_ionization_start(capsys):
    _, out, _ = run(capsys, "simulate", "--with-pi")
    delay = rows_of(out)[5]
    assert delay[1] == "delay"
    s_g = float(delay[8])
    others = [float(delay[k]) for k in (5, 6, 7, 11)]
    assert s_g > max(others)
    assert s_g > 0.1


# --- pnp ------------------------------------------------------------------------------------

def test_pnp_green_shape(capsys):
    code, out, _ = run(capsys, "pnp", "--channel", "GreenFilter", "--powers", "0:50:20")
    assert code == 0
    curve = curve_from_csv(out)
    assert len(curve.powers) == 20
    assert np.all(curve.pnp[1:] > 1.0)
    assert np.all(np.diff(curve.pnp) >= -1e-6)


def test_pnp_long_red_flat(capsys):
    _, out, _ = run(capsys, "pnp", "--channel", "LongRedFilter")
    assert np.abs(curve_from_csv(out).pnp - 1.0).max() <= 0.05


def test_pnp_single_zero(capsys):
    _, out, _ = run(capsys, "pnp", "--powers", "0:0:1")
    assert out.splitlines()[1:] == ["GreenFilter,0,1,1,1"]


def test_pnp_csv_round_trips(capsys):
    _, out, _ = run(capsys, "pnp", "--channel", "NIR", "--powers", "0.5:40:7:log")
    assert curve_to_csv(curve_from_csv(out)) == out


def test_pnp_reads_rates_and_timing(capsys, tmp_path):
    rates = tmp_path / "rates.json"
    rates.write_text(json.dumps({"channels": {"GreenFilter": {"k_sics": 0.0}, "Green532": {"k_sics": 0.0}}}))
    timing = tmp_path / "timing.json"
    timing.write_text(json.dumps({"readout_window": 200}))
    _, base, _ = run(capsys, "pnp")
    code, out, _ = run(capsys, "pnp", "--rates", str(rates), "--timing", str(timing))
    assert code == 0 and out != base
    assert curve_from_csv(out).pnp[-1] < 1.0


def test_pnp_writes_file(capsys, tmp_path):
    target = tmp_path / "curve.csv"
    code, out, _ = run(capsys, "pnp", "--out", str(target))
    assert code == 0 and out == ""
    _, stdout_copy, _ = run(capsys, "pnp")
    assert target.read_text() == stdout_copy


# --- synth and fit --------------------------------------------------------------------------

def test_synth_is_deterministic_and_matches_pnp(capsys):
    args = ("synth", "--channel", "BlueFilter", "--powers", "0:50:6")
    _, a, _ = run(capsys, *args, "--noise", "0.01", "--seed", "7")
    _, b, _ = run(capsys, *args, "--noise", "0.01", "--seed", "7")
    _, c, _ = run(capsys, *args, "--noise", "0.01", "--seed", "8")
    assert a == b and a != c
    _, clean, _ = run(capsys, *args)
    _, curve, _ = run(capsys, "pnp", "--channel", "BlueFilter", "--powers", "0:50:6")
    rows = rows_of(clean)[1:]
    cur = rows_of(curve)[1:]
    assert [r[3] for r in rows if r[2] == "1"] == [r[2] for r in cur]
    assert [r[3] for r in rows if r[2] == "0"] == [r[3] for r in cur]
    assert dataset_to_csv(dataset_from_csv(a)) == a


def test_synth_params_and_errors(capsys):
    code, _, _ = run(capsys, "synth", "--params", "k_sics=5,power_scaling=0.2")
    assert code == 0
    assert run(capsys, "synth", "--params", "k_s=5")[0] == 2
    assert run(capsys, "synth", "--params", "k_sics=abc")[0] == 2
    assert run(capsys, "synth", "--noise", "-1")[0] == 2


def test_fit_recovers_green(capsys, tmp_path):
    data = tmp_path / "green.csv"
    code, _, _ = run(capsys, "synth", "--channel", "GreenFilter", "--powers", "0:50:21",
                     "--params", "k_sics=20,power_scaling=0.11", "--noise", "0.01", "--seed", "0",
                     "--out", str(data))
    assert code == 0
    code, out, _ = run(capsys, "fit", str(data))
    assert code == 0
    doc = json.loads(out)
    assert set(doc) == {"params", "objective", "converged", "n_evals"}
    k = doc["params"]["k_sics"]
    assert abs(k["value"] - 20.0) <= 2.0
    assert k["minus"] > 0 and k["plus"] > 0
    assert doc["converged"] is True


def test_fit_red_scenario_frees_four_parameters(capsys, tmp_path):
    data = tmp_path / "red.csv"
    run(capsys, "synth", "--channel", "RedFilter", "--powers", "0:50:6", "--out", str(data))
    code, out, _ = run(capsys, "fit", str(data), "--scenario", "red", "--restarts", "2")
    assert code in (0, 4)
    assert set(json.loads(out)["params"]) == {"k_sics", "k_e_minus", "k_i", "k_r"}


def test_fit_accepts_ratio_rows_and_problem_file(capsys, tmp_path):
    from nvsinglet import fit as F
    rows = F.synth_dataset("BlueFilter", np.linspace(0, 50, 6))
    ratios = tmp_path / "ratios.csv"
    ratios.write_text(F.dataset_to_csv(F.pnp_dataset(rows)))
    code, out, _ = run(capsys, "fit", str(ratios), "--restarts", "2")
    assert code in (0, 4) and "k_sics" in json.loads(out)["params"]
    problem = tmp_path / "problem.json"
    problem.write_text(json.dumps({"free_params": [
        {"name": "k_sics", "lower": 0.0, "upper": 50.0, "initial": 5.0}]}))
    pl = tmp_path / "pl.csv"
    pl.write_text(F.dataset_to_csv(rows))
    code, out, _ = run(capsys, "fit", str(pl), "--problem", str(problem), "--restarts", "2")
    assert code == 0
    assert json.loads(out)["params"]["k_sics"]["value"] == pytest.approx(22.8, rel=1e-3)


def test_fit_input_errors(capsys, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("channel,power_mw,with_pi,pl_norm,sigma\n")
    code, _, err = run(capsys, "fit", str(empty))
    assert code == 2 and "no rows" in err
    assert run(capsys, "fit", str(tmp_path / "missing.csv"))[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert run(capsys, "fit", str(bad))[0] == 2
    green = tmp_path / "g.csv"
    green.write_text("channel,power_mw,with_pi,pl_norm,sigma\nGreen532,0,1,1,\n")
    assert run(capsys, "fit", str(green))[0] == 2


def test_fit_non_convergence_exit_code(capsys, tmp_path, monkeypatch):
    from nvsinglet import fit as F
    data = tmp_path / "blue.csv"
    data.write_text(F.dataset_to_csv(F.synth_dataset("BlueFilter", np.linspace(0, 50, 6))))
    real = F.fit

    def unconverged(*args, **kwargs):
        result = real(*args, **kwargs)
        result.converged = False
        return result

    monkeypatch.setattr(F, "fit", unconverged)
    code, out, err = run(capsys, "fit", str(data), "--restarts", "2")
    assert code == 4 and "did not converge" in err
    assert json.loads(out)["converged"] is False


# --- energy and popsweep ------------------------------------------------------------------------

@pytest.mark.parametrize("nm, ev", [("550", 2.25), ("650", 1.91), ("674", 1.84)])
def test_energy(capsys, nm, ev):
    code, out, _ = run(capsys, "energy", nm)
    assert code == 0
    value = float(out.split("=")[1].split()[0])
    assert abs(value - ev) <= 0.01


def test_energy_constant_and_inverse(capsys):
    assert run(capsys, "energy", "1239.84")[1] == "1239.84 nm = 1 eV\n"
    assert run(capsys, "energy", "1", "--unit", "eV")[1] == "1 eV = 1239.84 nm\n"
    assert run(capsys, "energy", "0")[0] == 2


def test_popsweep(capsys):
    code, out, err = run(capsys, "popsweep", "--durations", "0:800:9", "--powers", "0.05:1.6:6:log")
    assert code == 0
    rows = rows_of(out)
    assert rows[0][0] == "power_mw" and len(rows[0]) == 10 and len(rows) == 7
    m = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    assert np.all(m[:, 0] < 0.01)
    assert "interior" in err and "grid edge" not in err


# --- errors and determinism ----------------------------------------------------------------------

def test_config_errors(capsys, tmp_path):
    assert run(capsys, "pnp", "--channel", "Ultraviolet")[0] == 2
    assert run(capsys, "pnp", "--powers", "1:0:3")[0] == 2
    assert run(capsys, "pnp", "--rates", str(tmp_path / "nope.json"))[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "pnp", "--timing", str(bad))[0] == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"intrinsic": {"k_bogus": 1}}))
    assert run(capsys, "pnp", "--rates", str(unknown))[0] == 2


def test_simulation_error_exit_code(capsys, tmp_path):
    rates = tmp_path / "rates.json"
    rates.write_text(json.dumps({"intrinsic": {"k_f_minus": 0.0}}))
    code, _, err = run(capsys, "pnp", "--rates", str(rates))
    assert code == 3 and "simulation failed" in err


def test_subprocess_byte_identical(tmp_path):
    cmd = [sys.executable, "-m", "nvsinglet", "synth", "--channel", "RedFilter", "--noise", "0.01",
           "--powers", "0:50:5", "--seed", "11"]
    a = subprocess.run(cmd, capture_output=True, check=True)
    b = subprocess.run(cmd, capture_output=True, check=True)
    assert a.stdout == b.stdout and a.stdout
    bad = subprocess.run([sys.executable, "-m", "nvsinglet", "pnp", "--channel", "Nope"], capture_output=True)
    assert bad.returncode == 2
