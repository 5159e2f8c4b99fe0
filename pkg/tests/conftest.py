import pytest
import torch

from vdsm.config import TrainConfig
from vdsm.datasets import make_dataset

torch.set_num_threads(1)


def tiny_config(**kw):
    base = dict(
        frame_shape=(3, 8, 8), kappa_z=2, kappa_s=2, n_experts=2, kappa_d=2, enc_channels=(4, 4),
        dec_channels=(4,), identity_dim=4, rnn_hidden=4, token_dim=2, trans_hidden=4, seq_len=4,
        batch_size=2, pretrain_epochs=3, sequence_epochs=2,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data():
    return make_dataset("pendulum", 8, seed=1, T=4, size=8)


# criterion number -> (passed, detail); printed at the end of the run
ACCEPTANCE = {}


def record(key, passed, detail):
    ACCEPTANCE[key] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
