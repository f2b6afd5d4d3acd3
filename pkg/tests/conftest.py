import numpy as np
import pytest

from cesynth.data import DatasetManifest
from cesynth.phantom import PhantomParams, generate_case
from cesynth.preprocess import SlicePolicy, build_dataset


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid:
                continue
            label = rep.nodeid.split("::")[-1].replace("test_", "", 1)
            lines.append((label, outcome.upper()))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for label, outcome in sorted(lines):
            terminalreporter.write_line(f"[{outcome}] {label}")


@pytest.fixture(scope="session")
def phantom_cases():
    return [generate_case(PhantomParams(seed=s)) for s in range(3)]


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, phantom_cases):
    """Small built dataset: 2 train patients, 1 test patient."""
    out = tmp_path_factory.mktemp("dataset")
    split = {c.patient_id: ("train" if i < 2 else "test") for i, c in enumerate(phantom_cases)}
    build_dataset(phantom_cases, SlicePolicy(), split, out)
    return out


@pytest.fixture(scope="session")
def dataset_manifest(dataset_dir):
    return DatasetManifest.load(dataset_dir)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
