import pytest

from vlffd.config import RunConfig

TINY = {
    "corpus": {"identities": 3, "frames": 6, "frame_size": 24, "cross_identities": 2},
    "model": {"input_size": 16, "stage_channels": [4, 6], "d": 8, "d_v": 8, "d_t": 8, "patch": 8, "n_l": 4,
              "question_len": 2, "answer_len": 6, "mixer_layers": 1, "mixer_hidden": 8},
    "vlfm": {"n_heads": 2},
    "stages": {"1": {"epochs": 2, "decay_start": 1, "batch_size": 16},
               "2": {"epochs": 2, "batch_size": 16},
               "3": {"epochs": 2, "decay_start": 1, "batch_size": 16}},
    "sampling": {"real_frames": 4, "fake_frames": 2, "sbi_real_frames": 2, "test_frames": 3},
    "annotation": {"pairs_per_method": 2},
    "sbi_copies": 2,
}


@pytest.fixture
def tiny_cfg():
    return RunConfig().with_overrides(TINY)


# filled by the acceptance suite, echoed after the run so the lines survive output capture
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
