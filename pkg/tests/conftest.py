import numpy as np
import pytest

from pombu.mdp import FiniteMdp, TabularPolicy
from pombu.posterior import PosteriorEnsemble


def random_dag_posterior(rng, num_states, num_actions, horizon, num_members, convention="per-state"):
    """Members only move to higher-indexed states; the last state is the absorbing terminal."""
    S, A, K = num_states, num_actions, num_members
    terminal = S - 1
    next_state = np.full((K, S, A), terminal, dtype=np.int64)
    reward = np.zeros((K, S, A))
    for s in range(S - 1):
        for a in range(A):
            for k in range(K):
                if k > 0 and rng.random() < 0.3:
                    next_state[k, s, a] = next_state[0, s, a]
                    reward[k, s, a] = reward[0, s, a]
                else:
                    next_state[k, s, a] = rng.integers(s + 1, S)
                    reward[k, s, a] = np.round(rng.uniform(-1.0, 1.0), 3)
    rho = np.zeros(S)
    rho[: S - 1] = rng.dirichlet(np.ones(S - 1))
    return PosteriorEnsemble(next_state, reward, horizon, rho, terminal, convention)


def random_posterior_suite(seed, count=100):
    rng = np.random.default_rng(seed)
    suite = []
    for i in range(count):
        S = int(rng.integers(2, 7))
        A = int(rng.integers(1, 4))
        H = int(rng.integers(1, 6))
        K = int(rng.integers(1, 5))
        convention = "per-state" if i % 2 == 0 else "per-state-action"
        ens = random_dag_posterior(rng, S, A, H, K, convention)
        policy = TabularPolicy(rng.dirichlet(np.ones(A), size=S))
        suite.append((ens, policy))
    return suite


def random_mdp(rng, num_states=4, num_actions=2, horizon=3):
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    R = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    rho = rng.dirichlet(np.ones(num_states))
    return FiniteMdp(P, R, rho, horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
