import sys

import pytest

from deblur_splat.config import TrainConfig, apply_overrides
from deblur_splat.dataset import Dataset
from deblur_splat.synth import SceneScript, generate

TINY_SCRIPT = {
    "width": 32,
    "height": 32,
    "focal": 40.0,
    "num_frames": 4,
    "sub_samples": 4,
    "background": {"half_extent": 1.8, "spacing": 0.2, "scale": 0.12, "block": 2},
    "objects": [{"radius": 0.3, "spacing": 0.1, "scale": 0.06,
                 "trajectory": {"kind": "circular", "center": [0.0, 0.0, 3.0], "radius": 0.4, "revolutions": 0.5}}],
    "camera": {"shake_amplitude": [0.05, 0.04, 0.0]},
}

TINY_TRAIN = {
    "virtual_views": 3,
    "log_every": 1,
    "schedule": {"iters_stage1": 6, "iters_track_warmup_end": 10, "iters_total": 14},
    "field_net": {"depth": 2, "width": 8, "pos_freqs": 2, "time_freqs": 2},
    "densify": {"interval": 4, "start": 4, "stop_fraction": 1.0},
}


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    generate(SceneScript.from_dict(TINY_SCRIPT), out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return Dataset(tiny_dataset_dir)


@pytest.fixture
def make_config(tiny_dataset_dir, tmp_path):
    def make(**overrides):
        d = apply_overrides(dict(TINY_TRAIN, dataset=str(tiny_dataset_dir), out_dir=str(tmp_path / "run")), overrides)
        return TrainConfig.from_dict(d)

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {name}: {detail}")
