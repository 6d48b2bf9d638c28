import numpy as np
import pytest

from dynsparse.config import RunConfig
from dynsparse.data import DatasetSpec
from dynsparse import harness


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """One short end-to-end training run shared by CLI/eval/bench tests."""
    out = tmp_path_factory.mktemp("mini_run")
    cfg = RunConfig(
        out_dir=str(out),
        seed=7,
        epochs=4,
        teacher_epochs=2,
        batch_size=64,
        warmup_frozen_epochs=1,
        dataset=DatasetSpec(train_size=256, eval_size=128),
    )
    teacher_rows = harness.run_train_teacher(cfg)
    student_rows = harness.run_train(cfg)
    return {"cfg": cfg, "teacher_rows": teacher_rows, "student_rows": student_rows}
