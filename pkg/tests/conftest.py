import numpy as np
import pytest

from namelink.datamodel import (BoundingBox, Caption, Detection, Example, Mention,
                                ReferredPerson)
from namelink.synthgen import WorldConfig, generate_world


def make_detection(x1, width=0.2, y1=0.1, height=0.8, d_v=4, seed=0, face=None, crop=None):
    rng = np.random.default_rng(seed)
    box = BoundingBox(x1, y1, x1 + width, y1 + height)
    face_box = BoundingBox(x1 + 0.25 * width, y1, x1 + 0.75 * width, y1 + 0.5 * width)
    return Detection(box, face_box, rng.normal(size=d_v).astype(np.float32), face, crop)


def make_example(example_id="ex", names=2, xs=(0.1, 0.4, 0.7), links=((0, 0), (1, 1)),
                 widths=None, d_v=4, has_verb=True, identities=None):
    """Caption "[NAME] 3 [NAME] 3 ..." with one single-token mention per person."""
    tokens = []
    referred = []
    for i in range(names):
        referred.append(ReferredPerson((identities or [f"id{i}" for i in range(names)])[i],
                                       (Mention(len(tokens), len(tokens) + 1),)))
        tokens += [1, 3]
    widths = widths or [0.2] * len(xs)
    dets = [make_detection(x, w, d_v=d_v, seed=k) for k, (x, w) in enumerate(zip(xs, widths))]
    return Example(example_id, Caption(tuple(tokens), has_verb), dets, referred, list(links))


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldConfig(n_identities=200, seed=11))


# one status line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
