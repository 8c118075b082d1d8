import json
import os
import sys

import numpy as np
import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURES = os.path.join(HERE, "fixtures")
MODELS = os.path.join(FIXTURES, "models")
IMAGES = os.path.join(FIXTURES, "images")
SCAN = os.path.join(FIXTURES, "scan")

sys.path.insert(0, HERE)

TOYS = ["toy_int8", "toy_float", "toy_residual", "toy_pool", "toy_linear"]
QUANTIZED_TOYS = ["toy_int8", "toy_residual", "safetycore_toy"]


def model_path(name):
    return os.path.join(MODELS, f"{name}.tflite")


def model_bytes(name):
    with open(model_path(name), "rb") as f:
        return f.read()


def manifest(name):
    with open(os.path.join(MODELS, f"{name}.json")) as f:
        return json.load(f)


def load_toy(name, proxy=True):
    from modelbreak.quant import build_proxy
    from modelbreak.tflite import import_tflite

    model = import_tflite(model_bytes(name)).model
    return build_proxy(model) if proxy else model


def synthetic_image(i):
    from modelbreak.imageio import load_image

    return load_image(os.path.join(IMAGES, f"synth_{i:02d}.png"))[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        _ACCEPTANCE[report.nodeid] = (report.outcome, props.get("detail", ""), props.get("seconds"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail, seconds) in sorted(_ACCEPTANCE.items()):
        name = nodeid.split("::test_")[-1].replace("_", " ", 2).replace("_", "-")
        verdict = "PASS" if outcome == "passed" else "FAIL"
        took = f" [{seconds:.1f}s]" if seconds is not None else ""
        terminalreporter.write_line(f"{verdict}  {name}{took}  {detail}")
