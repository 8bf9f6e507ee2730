import json

import pytest

from rmpe import io
from rmpe.cli import EXIT_CODES, main
from rmpe.nms import NmsParams
from rmpe.synth import SynthConfig

FAST_OPTIM = {"grid_sigma1": 3, "grid_sigma2": 3, "grid_lam": 3, "grid_eta": 3, "max_rounds": 2}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    doc = json.loads(err.strip().splitlines()[-1])
    assert set(doc) == {"error", "exit_code", "message"}
    return doc


@pytest.fixture
def data(tmp_path, capsys):
    io.save_synth_config(tmp_path / "cfg.json", SynthConfig(seed=1, n_images=40))
    code, out, _ = run(capsys, "synth", "gen", "--config", tmp_path / "cfg.json",
                       "--out-gt", tmp_path / "gt.json", "--out-props", tmp_path / "props.json",
                       "--json")
    assert code == 0 and json.loads(out)["images"] == 40
    return tmp_path


def test_sdtn_gradcheck(capsys):
    code, out, _ = run(capsys, "sdtn", "gradcheck", "--trials", 20, "--json")
    assert code == 0 and json.loads(out)["pass"] is True
    code, _, err = run(capsys, "sdtn", "gradcheck", "--trials", 5, "--tol", 0)
    assert code == EXIT_CODES["numerical"] and error_of(err)["error"] == "check_failed"


def test_synth_seed_override_and_env_config(data, capsys, monkeypatch):
    monkeypatch.setenv("RMPE_CONFIG", str(data / "cfg.json"))
    code, out, _ = run(capsys, "synth", "gen", "--out-gt", data / "g2.json",
                       "--out-props", data / "p2.json", "--seed", 1)
    assert code == 0
    assert (data / "p2.json").read_bytes() == (data / "props.json").read_bytes()
    run(capsys, "synth", "gen", "--out-gt", data / "g3.json", "--out-props", data / "p3.json",
        "--seed", 2)
    assert (data / "p3.json").read_bytes() != (data / "props.json").read_bytes()


def test_nms_run_and_eval(data, capsys):
    io.save_params(data / "params.json", NmsParams())
    code, out, _ = run(capsys, "nms", "run", "--proposals", data / "props.json",
                       "--params", data / "params.json", "--out", data / "kept.json", "--json")
    summary = json.loads(out)
    assert code == 0 and summary["kept"] < summary["input"]
    code, out, _ = run(capsys, "eval", "--pred", data / "kept.json", "--gt", data / "gt.json",
                       "--out", data / "rep.json", "--json")
    assert code == 0
    assert json.loads(out)["map"] == io.load_report(data / "rep.json").map
    code, out, _ = run(capsys, "eval", "--pred", data / "kept.json", "--gt", data / "gt.json")
    assert code == 0 and "Total" in out


def test_nms_optimize_writes_params_and_trace(data, capsys):
    cfg = io.optim_config_from_dict(FAST_OPTIM)
    io.save_optim_config(data / "ocfg.json", cfg)
    code, out, _ = run(capsys, "nms", "optimize", "--proposals", data / "props.json",
                       "--gt", data / "gt.json", "--config", data / "ocfg.json",
                       "--out", data / "best.json", "--threads", 2, "--json")
    res = json.loads(out)
    assert code == 0
    assert io.load_params(data / "best.json").to_dict() == res["params"]
    trace = io.read_json(data / "best.trace.json")["payload"]["trace"]
    assert trace == res["trace"] and trace == sorted(trace)


def test_pgpg_fit_and_sample(data, capsys):
    code, out, _ = run(capsys, "pgpg", "fit", "--gt", data / "gt.json",
                       "--detections", data / "props.json", "--k", 3, "--components", 2,
                       "--out", data / "model.json", "--json")
    assert code == 0 and json.loads(out)["k"] == 3
    args = ("pgpg", "sample", "--model", data / "model.json", "--gt", data / "gt.json",
            "--n", 4, "--seed", 5, "--json")
    code, out, _ = run(capsys, *args, "--out", data / "s1.json")
    n_people = json.loads(out)["people"]
    assert code == 0 and json.loads(out)["proposals"] == 4 * n_people
    run(capsys, *args, "--out", data / "s2.json")
    assert (data / "s1.json").read_bytes() == (data / "s2.json").read_bytes()


def test_pipeline_deterministic(tmp_path, capsys):
    cfg = {"seed": 4, "validation_images": 30, "test_images": 30, "k": 3,
           "components": 2, "optim": FAST_OPTIM}
    (tmp_path / "pipe.json").write_text(json.dumps(cfg))
    code, out1, _ = run(capsys, "pipeline", "--config", tmp_path / "pipe.json",
                        "--out", tmp_path / "r1.json")
    assert code == 0
    run(capsys, "pipeline", "--config", tmp_path / "pipe.json", "--out", tmp_path / "r2.json")
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    rep = json.loads(out1)["payload"]
    assert rep["map_optimized_nms"] >= 0 and rep["seed"] == 4


@pytest.mark.parametrize("argv, code", [
    ((), "usage"),
    (("nms", "run", "--proposals", "x.json"), "usage"),
    (("eval", "--pred", "/nonexistent/p.json", "--gt", "/nonexistent/g.json"), "io"),
])
def test_error_exit_codes(capsys, argv, code):
    rc, _, err = run(capsys, *argv)
    assert rc == EXIT_CODES[code]
    assert error_of(err)["exit_code"] == rc


def test_format_and_value_errors(data, capsys):
    doc = io.params_to_doc(NmsParams())
    doc["payload"]["sigma1"] = 0
    (data / "bad.json").write_text(json.dumps(doc))
    rc, _, err = run(capsys, "nms", "run", "--proposals", data / "props.json",
                     "--params", data / "bad.json", "--out", data / "o.json")
    assert rc == EXIT_CODES["invalid_value"] and error_of(err)["error"] == "invalid_value"
    doc["payload"]["sigma1"] = 0.1
    doc["payload"]["bogus"] = 1
    (data / "bad.json").write_text(json.dumps(doc))
    rc, _, err = run(capsys, "nms", "run", "--proposals", data / "props.json",
                     "--params", data / "bad.json", "--out", data / "o.json")
    assert rc == EXIT_CODES["format"]
    with pytest.warns(UserWarning, match="bogus"):
        rc, _, _ = run(capsys, "nms", "run", "--proposals", data / "props.json",
                       "--params", data / "bad.json", "--out", data / "o.json", "--lenient")
    assert rc == 0


def test_unknown_image_is_data_error(data, capsys):
    io.save_annotations(data / "empty.json", [])
    rc, _, err = run(capsys, "eval", "--pred", data / "props.json", "--gt", data / "empty.json")
    assert rc == EXIT_CODES["data"] and error_of(err)["error"] == "unknown_image"


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "rmpe", "sdtn", "gradcheck", "--trials", "3",
                        "--json"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["pass"]
