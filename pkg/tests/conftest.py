import numpy as np
import pytest

from binens.model import EncoderConfig, build_encoder, quant_preset


def tiny_config(quant="fp", **kw) -> EncoderConfig:
    base = dict(vocab_size=20, max_seq_len=8, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16,
                num_classes=2, seed=3)
    base.update(kw)
    return EncoderConfig(quant=quant_preset(quant), **base)


def random_batch(rng, cfg, batch=4, seq=None, min_len=1):
    seq = seq or cfg.max_seq_len
    ids = rng.integers(1, cfg.vocab_size, size=(batch, seq))
    lengths = rng.integers(min_len, seq + 1, size=batch)
    mask = np.arange(seq)[None, :] < lengths[:, None]
    ids = np.where(mask, ids, 0)
    return ids, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_fp():
    return build_encoder(tiny_config("fp"))


def xor_task(seed=0, m=300, flip=0.05):
    """Noisy 2-D XOR: label is the quadrant parity, with a fraction of labels flipped."""
    g = np.random.default_rng(seed)
    X = g.uniform(-1, 1, size=(m, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    y[g.random(m) < flip] ^= 1
    return X, y


def boost_stumps(X, y, N, K=2):
    from binens.ensemble import adaboost_train, fit_stump
    return adaboost_train(lambda r, a, D: fit_stump(X, y, D.weights, K), lambda h: h.predict(X), y, N, K)


def prefix_errors(E, X, y):
    """Training error of the vote over the first n members, for n = 1..len(E)."""
    from binens.ensemble import vote
    preds = np.stack([h.predict(X) for h, _ in E.members])
    return [float(np.mean(vote(preds[:n], E.alphas[:n], E.num_classes)[0] != y)) for n in range(1, len(E) + 1)]


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
