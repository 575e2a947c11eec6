import time
from types import SimpleNamespace

import pytest

from graphparse import synthdata as sd
from graphparse import trainer as tr
from graphparse.model import ModelConfig, SegmentationModel
from graphparse.segnet import BackboneConfig

_LINES = []


@pytest.fixture
def report():
    """Record one verdict line per acceptance criterion; echoed again in the summary."""
    def emit(number, passed, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _LINES.append(line)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


# full-batch plain SGD on 10 fine samples, best of the lr / width / stride / batch sweep
OVERFIT_BACKBONE = BackboneConfig(widths=(32, 64, 128), convs_per_stage=2, output_stride=2)
OVERFIT_TRAIN = tr.TrainConfig(base_lr=0.05, steps=200, batch_size=10, augment=False)


@pytest.fixture(scope="session")
def overfit_run():
    """One 200-step run on a 10-sample fine set, shared by the trainer and acceptance tests."""
    data = sd.generate_split(6, "train", "fine", 10)
    model = SegmentationModel(ModelConfig(datasets=("fine",), backbone=OVERFIT_BACKBONE))
    t0 = time.perf_counter()
    history = tr.fit(model, {"fine": data}, OVERFIT_TRAIN)
    return SimpleNamespace(model=model, data=data, history=history, seconds=time.perf_counter() - t0)
