import time
from types import SimpleNamespace

import pytest

from dissectpoison.corruption import CorruptionConfig, clean_baseline, run_corruption_campaign
from dissectpoison.scenario import (
    planted_addresses,
    reference_concepts,
    reference_dataset,
    reference_model,
    reference_plant,
)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}
N_CRITERIA = 12


@pytest.fixture(scope="session")
def acceptance():
    def record(number, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")


@pytest.fixture(scope="session")
def reference():
    return SimpleNamespace(
        concepts=reference_concepts(),
        plant=reference_plant(),
        model=reference_model(),
        dataset=reference_dataset(),
        deep=planted_addresses(),
    )


@pytest.fixture(scope="session")
def baseline(reference):
    return clean_baseline(reference.model, reference.dataset)


@pytest.fixture(scope="session")
def campaign(reference, baseline):
    """campaign(mode, k, mask_source) -> (report, seconds) over the planted block3 neurons at eps k/255."""
    cache = {}

    def run(mode, k, mask_source="ground-truth"):
        key = (mode, k, mask_source)
        if key not in cache:
            cfgs = [
                CorruptionConfig(n, mode=mode, epsilon=k / 255, mask_source=mask_source) for n in reference.deep
            ]
            start = time.perf_counter()
            report = run_corruption_campaign(reference.model, reference.dataset, cfgs, baseline, keep_datasets=True)
            cache[key] = (report, time.perf_counter() - start)
        return cache[key]

    run.cache = cache
    return run
