import numpy as np
import pytest

from tokreduce.types import ReductionRecord, StageRecord

# filled by tests/test_acceptance.py, printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pruned_record(n_tokens, kept_sets, grid, stage_blocks=(4, 7, 10), total_blocks=12,
                  sample_id=None):
    stages = [StageRecord("pruned", np.asarray(k, dtype=np.int64)) for k in kept_sets]
    return ReductionRecord(n_tokens, stages, grid, stage_blocks, total_blocks, "topk",
                           sample_id)
