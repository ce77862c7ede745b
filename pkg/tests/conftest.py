import numpy as np
import pytest
import torch

from dacsr.catalog import build_catalog
from dacsr.encoder import EncoderConfig, SASRecEncoder, pad_batch
from dacsr.model import DacsrModel

torch.set_num_threads(1)


def toy_catalog(items=5, attrs=3, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(items):
        m = int(rng.integers(1, attrs + 1))
        recs.append((f"i{i}", [f"g{a}" for a in sorted(rng.choice(attrs, size=m, replace=False))]))
    return build_catalog(recs)


def toy_encoder(items=5, d=4, seed=0, dtype=torch.float64, max_len=6):
    cfg = EncoderConfig(hidden_dim=d, num_blocks=2, num_heads=1, dropout_rate=0.2, max_len=max_len)
    enc = SASRecEncoder(items, cfg, torch.Generator().manual_seed(seed)).to(dtype)
    enc.eval()
    return enc


def toy_dacsr(items=5, d=4, seed=0, lam=0.5, tau=1.0, dtype=torch.float64, **kw):
    cfg = EncoderConfig(hidden_dim=d, num_blocks=2, num_heads=1, dropout_rate=0.2, max_len=6)
    model = DacsrModel(items, cfg, lam, tau, generator=torch.Generator().manual_seed(seed), **kw).to(dtype)
    model.eval()
    return model


def toy_batch(items=5):
    seqs = [[0, 1, 2], [4], [3, 3, 1, 0], [2, 4]]
    x, mask = pad_batch(seqs)
    targets = torch.tensor([3, 0, 2, 1])
    return x, mask, targets


@pytest.fixture
def catalog5():
    return toy_catalog()


# acceptance criterion -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
