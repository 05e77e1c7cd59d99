import argparse
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from dissectpoison import cli
from dissectpoison.data import load_dataset
from dissectpoison.dissection import load_dissection
from dissectpoison.models import load_model
from dissectpoison.scenario import reference_dataset, reference_model, write_reference_files

SCENARIO = Path(__file__).resolve().parents[1] / "scenario"


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = _run("gen", "--concepts", SCENARIO / "concepts.json", "--n", 400, "--size", 32, "--seed", 42,
                "--plant", SCENARIO / "plant.json", "--out", out)
    assert code == 0
    return out


def test_fraction_syntax():
    assert cli.fraction("6/255") == 6 / 255
    assert cli.fraction("0.02") == 0.02
    assert cli.fraction(" 1/4 ") == 0.25
    for bad in ("six", "1/0", ""):
        with pytest.raises(argparse.ArgumentTypeError):
            cli.fraction(bad)


def test_checked_in_scenario_files_are_current(tmp_path):
    concepts, plant = write_reference_files(tmp_path)
    assert concepts.read_bytes() == (SCENARIO / "concepts.json").read_bytes()
    assert plant.read_bytes() == (SCENARIO / "plant.json").read_bytes()


def test_gen_reproduces_reference_scenario(generated):
    assert load_dataset(generated / "data").equals(reference_dataset())
    assert load_model(generated / "model").equals(reference_model())


def test_dissect_then_evaluate_same_run(generated, tmp_path, capsys):
    assert _run("dissect", "--model", generated / "model", "--data", generated / "data", "--layers", "block3",
                "--out", tmp_path / "d") == 0
    result, masks = load_dissection(tmp_path / "d")
    assert {n.layer for n in result.neurons} == {"block3"}
    assert result.concept_name(next(iter(result.neurons))) == "red"
    assert _run("evaluate", "--baseline", tmp_path / "d", "--corrupted", tmp_path / "d",
                "--out", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text())["rate"] == 0.0
    assert "manipulation rate 0.00%" in capsys.readouterr().out


def test_noise_command_writes_logged_dataset(generated, tmp_path):
    assert _run("noise", "--data", generated / "data", "--kind", "uniform", "--level", "4/255",
                "--fraction", "0.5", "--seed", 1, "--out", tmp_path / "n") == 0
    log = load_dataset(tmp_path / "n").provenance["corruption_log"]
    assert log[-1]["kind"] == "uniform" and log[-1]["level"] == 4 / 255
    assert len(log[-1]["indices"]) == 200


def test_missing_json_is_configuration_error(tmp_path):
    code = _run("gen", "--concepts", tmp_path / "nope.json", "--n", 4, "--plant", SCENARIO / "plant.json",
                "--out", tmp_path / "o")
    assert code == 2


def test_unknown_concept_in_plant_is_configuration_error(tmp_path):
    plant = json.loads((SCENARIO / "plant.json").read_text())
    plant["planted"][0]["concept"] = "purple"
    (tmp_path / "plant.json").write_text(json.dumps(plant))
    code = _run("gen", "--concepts", SCENARIO / "concepts.json", "--n", 4, "--plant", tmp_path / "plant.json",
                "--out", tmp_path / "o")
    assert code == 2


def test_bad_neuron_is_configuration_error(generated, tmp_path):
    assert _run("dissect", "--model", generated / "model", "--data", generated / "data", "--layers", "block3",
                "--out", tmp_path / "d") == 0
    code = _run("corrupt", "--model", generated / "model", "--data", generated / "data", "--baseline", tmp_path / "d",
                "--neuron", "block3:99", "--out", tmp_path / "c")
    assert code == 2


def test_corrupt_dataset_is_integrity_error(generated, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(generated / "data", data)
    manifest = json.loads((data / "manifest.json").read_text())
    manifest["entries"][0]["shape"] = [401, 3, 32, 32]
    (data / "manifest.json").write_text(json.dumps(manifest))
    code = _run("dissect", "--model", generated / "model", "--data", data, "--out", tmp_path / "d")
    assert code == 3


def test_missing_dissection_is_integrity_error(tmp_path):
    assert _run("evaluate", "--baseline", tmp_path, "--corrupted", tmp_path, "--out", tmp_path / "r.json") == 3


def test_argument_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["noise", "--data", "x", "--kind", "salt", "--level", "1", "--out", "y"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["corrupt", "--eps", "six"])
    assert exc.value.code == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "dissectpoison", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for name in ("gen", "dissect", "noise", "corrupt", "evaluate", "compare"):
        assert name in done.stdout
