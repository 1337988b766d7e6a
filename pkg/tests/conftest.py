import time

import numpy as np
import pytest

from segfool.datagen import SceneSpec, generate_dataset
from segfool.minisam import train_victim


@pytest.fixture(scope="session")
def tiny_data():
    """Twelve scenes for fast smoke tests."""
    return generate_dataset(SceneSpec(seed=11), 12)


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    """A briefly trained victim: weak, but its gradients and masks are real."""
    return train_victim(tiny_data[:8], epochs=2, prompts_per_step=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class DefaultRun:
    """Artifacts of one default-config pipeline run (gen-data, train-victim, craft, eval)."""

    def __init__(self, root):
        import json
        import os

        from segfool import config as C
        from segfool.attack import load_uap
        from segfool.cli import main
        from segfool.datagen import load_dataset
        from segfool.evaluation import load_report
        from segfool.minisam import load_weights

        self.root = str(root)
        self.data = os.path.join(self.root, "data")
        self.victim = os.path.join(self.root, "victim.msam")
        self.uap_path = os.path.join(self.root, "uap.duap")
        self.report_path = os.path.join(self.root, "eval.json")
        timing_path = os.path.join(self.root, "timings.json")
        timings = json.load(open(timing_path)) if os.path.exists(timing_path) else {}
        steps = [
            ("gen-data", os.path.join(self.data, "test_manifest.json"), ["gen-data", "--out", self.data]),
            ("train-victim", self.victim, ["train-victim", "--data", self.data, "--out", self.victim]),
            ("craft", self.uap_path, ["craft", "--data", self.data, "--victim", self.victim,
                                      "--out", self.uap_path]),
            ("eval", self.report_path, ["eval", "--data", self.data, "--victim", self.victim, "--uap",
                                        self.uap_path, "--mode", "all", "--out", self.report_path]),
        ]
        for name, product, argv in steps:
            if os.path.exists(product) and name in timings:
                continue
            start = time.perf_counter()
            code = main(argv)
            if code != 0:
                raise RuntimeError(f"default run: {name} exited {code}")
            timings[name] = time.perf_counter() - start
            with open(timing_path, "w") as fh:
                json.dump(timings, fh)
        self.timings = timings
        self.config = C.RunConfig({})
        self.train, _ = load_dataset(os.path.join(self.data, "train_manifest.json"))
        self.test, _ = load_dataset(os.path.join(self.data, "test_manifest.json"))
        self.model = load_weights(self.victim)
        self.uap = load_uap(self.uap_path)
        self.report = load_report(self.report_path)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Full-size run; SEGFOOL_ACCEPT_DIR keeps its artifacts between sessions."""
    import os

    keep = os.environ.get("SEGFOOL_ACCEPT_DIR")
    root = keep if keep else tmp_path_factory.mktemp("default-run")
    if keep:
        os.makedirs(keep, exist_ok=True)
    return DefaultRun(root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
