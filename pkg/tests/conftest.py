import time
from dataclasses import dataclass

import pytest

from ara_vos import experiments as E
from ara_vos import vos_model as vm

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"\nacceptance {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@dataclass
class TrainedRun:
    cfg: E.RunConfig
    train: list
    evals: list
    params: vm.VosParams
    clean: list
    train_seconds: float
    eval_seconds: float


@pytest.fixture(scope="session")
def trained_run() -> TrainedRun:
    """The default-config model every acceptance check shares, trained once per session."""
    cfg = E.RunConfig().finalize()
    train, evals = E.build_datasets(cfg)
    t0 = time.perf_counter()
    params = vm.train(train, cfg.train)
    t1 = time.perf_counter()
    clean = E.evaluate(params, evals)
    t2 = time.perf_counter()
    return TrainedRun(cfg, train, evals, params.frozen(), clean, t1 - t0, t2 - t1)
