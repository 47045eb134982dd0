import json
import time
from types import SimpleNamespace

import pytest

from hybridgs.cli import main
from hybridgs.metrics import EvalReport
from hybridgs.trainer import desk_config

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(n, passed, detail=""):
    ACCEPTANCE[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


def _cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"hybridgs {' '.join(map(str, args))} exited with {code}"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """synth -> train -> eval through the CLI on the default scene, plus the 3DGS baseline.

    Shared by the end-to-end acceptance checks; takes a few minutes on one core.
    """
    root = tmp_path_factory.mktemp("desk")
    data, cfg = root / "data", root / "desk.json"
    cfg.write_text(json.dumps(desk_config().to_dict()))
    t0 = time.perf_counter()
    _cli("synth", "--out", data)
    _cli("train", "--data", data, "--config", cfg, "--out", root / "hybrid.ckpt")
    _cli("eval", "--ckpt", root / "hybrid.ckpt", "--data", data, "--report", root / "hybrid.json")
    runtime = time.perf_counter() - t0
    _cli("eval", "--ckpt", root / "hybrid.ckpt.iterative", "--data", data, "--report", root / "iterative.json")
    t1 = time.perf_counter()
    _cli("train", "--data", data, "--config", cfg, "--out", root / "baseline.ckpt", "--baseline-3dgs")
    _cli("eval", "--ckpt", root / "baseline.ckpt", "--data", data, "--report", root / "baseline.json")
    return SimpleNamespace(
        root=root, data=data, runtime=runtime, baseline_runtime=time.perf_counter() - t1,
        hybrid=EvalReport.load(root / "hybrid.json"), iterative=EvalReport.load(root / "iterative.json"),
        baseline=EvalReport.load(root / "baseline.json"))
