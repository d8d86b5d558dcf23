import sys

import numpy as np
import pytest

from contextprobe.scenegen import ClassSpec, CoocSpec, SceneSpec


def two_class_spec(p_anchor=(1.0, 1.0), p01=0.0, stuff=(False, False), h=32, w=32, instances=((1, 1), (1, 1))):
    classes = (
        ClassSpec(0, "square", (0.1, 0.2, 0.8), (0.15, 0.2), is_stuff=stuff[0], instances=instances[0]),
        ClassSpec(1, "disc", (0.8, 0.2, 0.1), (0.15, 0.2), is_stuff=stuff[1], instances=instances[1]),
    )
    cooc = CoocSpec(p_anchor=p_anchor, p_cond=((0.0, p01), (0.0, 0.0)), max_objects=4)
    return SceneSpec(classes=classes, cooc=cooc, height=h, width=w)


def three_class_spec(h=32, w=32):
    classes = (
        ClassSpec(0, "square", (0.1, 0.2, 0.8), (0.12, 0.18)),
        ClassSpec(1, "disc", (0.8, 0.2, 0.1), (0.12, 0.18)),
        ClassSpec(2, "triangle", (0.2, 0.8, 0.2), (0.15, 0.22)),
    )
    cooc = CoocSpec(p_anchor=(0.6, 0.4, 0.5), p_cond=((0, 0.7, 0), (0, 0, 0.3), (0.2, 0, 0)), max_objects=4)
    return SceneSpec(classes=classes, cooc=cooc, height=h, width=w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
