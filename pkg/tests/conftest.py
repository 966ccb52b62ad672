import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """30 synthetic students; shared by several modules' tests."""
    from progkt import datamodel as dm
    return dm.synth_generate(dm.SynthConfig(n_students=30, n_problems=20, n_concepts=6), seed=3)


@pytest.fixture(scope="session")
def tiny_train_config():
    from progkt import trainer as tr
    return tr.TrainConfig(hidden_dim=8, problem_dim=8, code_dim=8, token_dim=8, gat_in_dim=8,
                          gat_hidden_dim=8, code_filters=4, code_epochs=2, code_lr=3e-3,
                          code_batch_size=128, sg_epochs=1, sg_max_pairs=20_000, epochs=1,
                          batch_size=8, lr=2e-3, seeds=(0,), walks_per_node=2, walk_length=6)


@pytest.fixture(scope="session")
def tiny_prepared(tiny_corpus, tiny_train_config):
    from progkt import trainer as tr
    kb, events, roles, _ = tiny_corpus
    return tr.Prepared(kb, events, roles, tiny_train_config)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
