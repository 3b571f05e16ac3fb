import numpy as np
import pytest

from eta_ctr.data import Instance, Vocab


def toy_vocab(n_users=5, n_items=30, n_categories=6, n_contexts=4) -> Vocab:
    return Vocab(n_users, n_items, n_categories, n_contexts, np.arange(n_items) % n_categories)


def toy_instances(n, vocab: Vocab, S=4, L=8, seed=0, min_long=0) -> list[Instance]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ns = int(rng.integers(1, S + 1))
        nl = int(rng.integers(min_long, L + 1))
        si = rng.integers(0, vocab.n_items, ns)
        li = rng.integers(0, vocab.n_items, nl)
        t = int(rng.integers(vocab.n_items))
        out.append(Instance(
            user_id=int(rng.integers(vocab.n_users)),
            target_item=t,
            target_category=int(vocab.item_category[t]),
            context=int(rng.integers(vocab.n_contexts)),
            short_items=tuple(int(i) for i in si),
            short_cats=tuple(int(vocab.item_category[i]) for i in si),
            long_items=tuple(int(i) for i in li),
            long_cats=tuple(int(vocab.item_category[i]) for i in li),
            label=int(rng.integers(2)),
        ))
    return out


@pytest.fixture
def vocab():
    return toy_vocab()


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
