from dartfx.slad import EncoderConfig, synth_dataset
from dotenv import load_dotenv
from pathlib import Path
import pytest

@pytest.fixture(scope="session", autouse=True)
def load_env():
    dotenv_path = Path(__file__).parent / "../.env"  # Construct path from current test file dir
    load_dotenv(dotenv_path=dotenv_path)

@pytest.fixture(scope="session")
def tests_dir():
    return Path(__file__).parent

@pytest.fixture
def tiny_teacher_config():
    return EncoderConfig(name="tiny-teacher", depth=2, dim=16, heads=2, patch_size=4, image_size=8, init_seed=5)

@pytest.fixture
def tiny_student_config():
    return EncoderConfig(name="tiny-student", depth=2, dim=8, heads=2, patch_size=4, image_size=8, init_seed=6)

@pytest.fixture
def tiny_data():
    return synth_dataset(classes=3, per_class=12, image_size=8, seed=0, test_per_class=4)

@pytest.fixture(autouse=True)
def no_output_root_env(monkeypatch):
    # runs in tests always write where the test says
    monkeypatch.delenv("SLAD_OUTPUT_ROOT", raising=False)
