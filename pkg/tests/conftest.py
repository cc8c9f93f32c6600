import numpy as np
import pytest
import torch

from attentionmask.backbone import BackboneConfig
from attentionmask.config import RunConfig
from attentionmask.data import AnnotatedObject, ImageSample

torch.set_num_threads(1)


def tiny_config(**training) -> RunConfig:
    cfg = RunConfig()
    cfg.backbone = BackboneConfig(channels=(4, 8, 8))
    cfg.heads.k = 50
    cfg.training.windows_per_image = 16
    for key, value in training.items():
        setattr(cfg.training, key, value)
    return cfg


def square_object(id, x, y, w, h, size=(128, 128)) -> AnnotatedObject:
    mask = np.zeros(size, dtype=bool)
    mask[y:y + h, x:x + w] = True
    return AnnotatedObject.from_mask(id, mask)


def sample_with(objects, size=(128, 128), seed=0, id="s0") -> ImageSample:
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, size=(*size, 3)).astype(np.float32)
    return ImageSample(id=id, image=image, objects=list(objects))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list = []  # one "criterion N PASS/FAIL ..." line per acceptance check, echoed in the summary


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
