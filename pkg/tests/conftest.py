import pytest
import torch

from sammae.data import generate_synthetic_lesion_dataset
from sammae.model import MaskedAutoencoderViT, PatchConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**kw) -> PatchConfig:
    base = dict(image_size=16, patch_size=8, embed_dim=8, num_heads=2, encoder_depth=1,
                decoder_dim=8, decoder_depth=1, decoder_heads=2, num_classes=2)
    base.update(kw)
    return PatchConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return MaskedAutoencoderViT(tiny_config())


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic_lesion_dataset(32, 4, 64, seed=11)


@pytest.fixture
def desk_model():
    torch.manual_seed(0)
    return MaskedAutoencoderViT(PatchConfig.desk())


@pytest.fixture
def acceptance():
    def report(number: int, name: str, passed: bool, detail: str = ""):
        line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
