import numpy as np
import pytest

from leakimpact.eventlog import SyntheticConfig, TemporalSplit, generate_synthetic, temporal_split


def brute_auc(scores, labels):
    """O(n^2) pairwise AUC; ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


def small_config(seed=0, **kw):
    base = dict(num_users=300, num_items=120, latent_dim=4, drift_rate=0.1, item_lifecycle_days=5,
                days=20, events_per_day=500, seed=seed)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    log, content, truth = generate_synthetic(small_config())
    split = TemporalSplit.from_days(12, 2)
    train, ev = temporal_split(log, split)
    return {"log": log, "content": content, "truth": truth, "split": split,
            "train": train, "eval": ev}


ACCEPTANCE_LINES = []


def report_criterion(n, ok, detail):
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_line("===== acceptance criteria =====")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
    terminalreporter.write_line("===== end =====")
