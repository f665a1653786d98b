import numpy as np
import pytest

from skillroute.domain import CandidateRecord, Dataset, FeatureSchema, LoggedInteraction, sort_candidates


def make_candidates(confs, intents=None, skills=None, numeric=(0.5, 0.5), device="dev_a"):
    intents = intents or [f"i{k}" for k in range(len(confs))]
    skills = skills or [f"s{k}" for k in range(len(confs))]
    return sort_candidates(
        CandidateRecord(i, s, float(c), tuple(numeric), (device,)) for i, s, c in zip(intents, skills, confs)
    )


def make_interaction(cands, action=0, propensity=0.5, reward=1.0, iid="x"):
    return LoggedInteraction(tuple(cands), action, propensity, reward, cands[0].intent_id, iid)


def random_dataset(n=200, seed=0, n_segments=3, t_range=(1, 4), numeric_dim=2):
    """Uniform-random logger over random candidate sets; propensity is exactly 1/T."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        t = int(rng.integers(t_range[0], t_range[1] + 1))
        seg = int(rng.integers(n_segments))
        confs = np.sort(rng.uniform(0.05, 0.95, t))[::-1]
        intents = [f"seg{seg}"] + [f"seg{seg}_alt{m}" for m in range(1, t)]
        skills = [f"skill{int(v)}" for v in rng.integers(0, 6, t)]
        cands = tuple(
            CandidateRecord(intents[m], skills[m], float(confs[m]),
                            tuple(rng.uniform(0, 1, numeric_dim).tolist()), (f"dev{int(rng.integers(3))}",))
            for m in range(t)
        )
        a = int(rng.integers(t))
        out.append(LoggedInteraction(cands, a, 1.0 / t, float(rng.random() < 0.6), cands[0].intent_id, f"r{k}"))
    return Dataset(out, FeatureSchema.from_interactions(out, numeric_dim), "random")


@pytest.fixture
def small_dataset():
    return random_dataset()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
