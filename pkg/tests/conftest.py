import copy

import pytest

from concept_agent.config import RunConfig, build_environment
from concept_agent.planner import ConceptAgent

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grounded():
    """One grounding run on the default planted world, shared read-only."""
    config = RunConfig()
    env = build_environment(config)
    agent = ConceptAgent(env.llm, env.encoder, env.train, config.agent_config())
    state = agent.run()
    return config, env, agent, state


@pytest.fixture
def grounded_copy(grounded):
    config, _, _, state = grounded
    env2 = build_environment(config)
    agent2 = ConceptAgent(env2.llm, env2.encoder, env2.train, config.agent_config())
    return config, env2, agent2, copy.deepcopy(state)
