"""Shared fixtures: the benchmark dataset, the trained model and the
calibration artifacts, built once per session through the CLI entry points."""

from __future__ import annotations

import json
import time

import pytest

from atrkit.adaptation import ThreatDefinition, ThreatEntry
from atrkit.cli import main as cli_main

DATA_SEED = 17
TRAIN_SEED = 3
N_BAGS = 120


def run_cli(*argv):
    rc = cli_main([str(a) for a in argv])
    assert rc == 0, f"CLI failed ({rc}): {argv}"


def make_threat_definition(path):
    tdef = ThreatDefinition(
        entries=(
            ThreatEntry("saline", (1050.0, 1215.0), min_mass_g=0.5),
            ThreatEntry("rubber", (1170.0, 1290.0), min_mass_g=0.5),
            ThreatEntry("clay", (1530.0, 1715.0), min_mass_g=0.5),
        ),
        required_pd=0.9,
    )
    tdef.save(path)
    return tdef


@pytest.fixture(scope="session")
def suite_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("suites")


@pytest.fixture(scope="session")
def full_pipeline(suite_dir):
    """Timed end-to-end run: generate, train, calibrate, evaluate.

    Returns paths to every artifact plus the elapsed wall time and the
    operating-point report (no offsets, calibrated alphas).
    """
    root = suite_dir / "main"
    root.mkdir()
    data = root / "data"
    tdef_path = root / "threats.json"
    model = root / "model.json"
    offsets = root / "offsets.json"
    alphas = root / "alphas.json"
    report = root / "report.json"
    make_threat_definition(tdef_path)

    start = time.monotonic()
    run_cli("generate", "--n-bags", N_BAGS, "--seed", DATA_SEED, "--out", data)
    run_cli("train", "--data", data, "--split", "odd", "--model", model,
            "--seed", TRAIN_SEED)
    run_cli("calibrate", "--data", data, "--split", "odd", "--model", model,
            "--threats", tdef_path, "--out-offsets", offsets,
            "--out-alphas", alphas)
    run_cli("evaluate", "--data", data, "--split", "even", "--model", model,
            "--threats", tdef_path, "--alphas", alphas, "--report", report)
    elapsed = time.monotonic() - start

    with open(report) as fh:
        op_report = json.load(fh)
    return {
        "data": data,
        "tdef": tdef_path,
        "model": model,
        "offsets": offsets,
        "alphas": alphas,
        "elapsed_s": elapsed,
        "report": op_report,
    }
