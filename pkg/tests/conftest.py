import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from datspect.labels import Label  # noqa: E402
from datspect.splits import DatasetManifest, ManifestEntry  # noqa: E402


def make_manifest(n_control, n_pd, prefix="s"):
    labels = [Label.CONTROL] * n_control + [Label.PD] * n_pd
    return DatasetManifest(
        [ManifestEntry(f"{prefix}{i:04d}", Path(f"img/{prefix}{i:04d}.png"), lab) for i, lab in enumerate(labels)]
    )


@pytest.fixture
def cohort_manifest():
    """659 subjects: 210 control, 449 PD."""
    return make_manifest(210, 449)


DESK = {"n_control": 40, "n_pd": 92, "test_control": 10, "test_pd": 22, "pd_uptake_factor": 0.4}


@pytest.fixture(scope="session")
def desk_images(tmp_path_factory):
    """Preprocessed phantom tree sized for a 100 train / 32 test holdout."""
    from datspect.cli import main

    root = tmp_path_factory.mktemp("desk")
    assert main(["synth", "--out", str(root / "syn"), "--n-control", str(DESK["n_control"]),
                 "--n-pd", str(DESK["n_pd"]), "--pd-uptake-factor", str(DESK["pd_uptake_factor"])]) == 0
    assert main(["preprocess", "--manifest", str(root / "syn/manifest.csv"), "--out", str(root / "png")]) == 0
    return root


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, line = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num}: {line}")
