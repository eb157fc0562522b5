import os

import numpy as np
import pytest
import torch

from vlinknet.generator import GeneratorConfig
from vlinknet.imagecore import save_image, save_mask
from vlinknet.synthetic import blob_masks, textured_images

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_generator_config():
    return GeneratorConfig(base_channels=2, input_resolution=32, decoder_mults=(4, 4, 4, 4, 4))


@pytest.fixture
def image_dirs(tmp_path):
    """Four textured 32x32 images and four masks written to disk."""
    img_dir, mask_dir = tmp_path / "images", tmp_path / "masks"
    img_dir.mkdir()
    mask_dir.mkdir()
    for i, im in enumerate(textured_images(4, 32, seed=5)):
        save_image(im, img_dir / f"img{i}.png")
    for i, m in enumerate(blob_masks(4, 32, seed=6)):
        save_mask(m, mask_dir / f"mask{i}.png")
    return str(img_dir), str(mask_dir)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_configure(config):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
