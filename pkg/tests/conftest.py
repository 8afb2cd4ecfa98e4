import random

import pytest

from avfl.hom_crypto import hom_keygen
from avfl.ph_cipher import GroupParams, generate_group

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def g23():
    return GroupParams(23, 11)


@pytest.fixture(scope="session")
def group64():
    return generate_group(64, random.Random("group64"))


@pytest.fixture(scope="session")
def group512():
    return generate_group(512, random.Random("group512"))


@pytest.fixture(scope="session")
def keypair512():
    return hom_keygen(512, random.Random("paillier512"))


@pytest.fixture(scope="session")
def keypair1024():
    return hom_keygen(1024, random.Random("paillier1024"))


@pytest.fixture
def report():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def _report(name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" - {detail}" if detail else ""))

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
