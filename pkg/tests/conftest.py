import sys
from pathlib import Path

import pytest

from hdrvqa.ladder import EncoderContract

FAKE_TOOL = str(Path(__file__).with_name("fake_toolchain.py"))


def fake_encoder(**overrides) -> EncoderContract:
    base = [sys.executable, FAKE_TOOL]
    return EncoderContract(
        cut=base + ["cut", "{input}", "{output}"],
        encode=base + ["encode", "{input}", "{output}", "{width}", "{height}", "{bitrate_kbps}"],
        upscale=base + ["upscale", "{input}", "{output}", "{width}", "{height}"],
        probe=base + ["probe", "{input}"],
        decode_frame=base + ["decode", "{input}", "{output}", "{index}"],
        container=".json", timeout=60, **overrides)


@pytest.fixture
def encoder():
    return fake_encoder()


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
