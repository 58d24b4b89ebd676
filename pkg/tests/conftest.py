import pytest

from ofdmdet.chanmodel import ChannelConfig
from ofdmdet.detect import InitMode
from ofdmdet.learn import LossKind, TrainConfig, train

# reduced full-symbol run shared by the learning example and the acceptance smoke variant
SMOKE_N = 8
SMOKE_ITERATIONS = 2000


def smoke_training(mode: InitMode):
    chan = ChannelConfig(SMOKE_N)
    loss = LossKind.EUCLIDEAN_MULTI if mode is InitMode.ZF else LossKind.NORMALIZED_MULTI
    cfg = TrainConfig(num_iterations=SMOKE_ITERATIONS, init_mode=mode, loss_kind=loss, master_seed=1)
    return chan, cfg, train(chan, cfg)


@pytest.fixture(scope="session")
def cn_smoke():
    return smoke_training(InitMode.ZF)


@pytest.fixture(scope="session")
def dnt_smoke():
    return smoke_training(InitMode.ZERO)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
