import json
from pathlib import Path

import pytest

from rulesense import build_tracking_kb, load_registry, parse_program

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def kb_text():
    return build_tracking_kb()


@pytest.fixture(scope="session")
def kb_constructs(kb_text):
    return parse_program(kb_text)


@pytest.fixture(scope="session")
def registry_s1():
    return load_registry(FIXTURES / "registry_s1.json")


@pytest.fixture(scope="session")
def s1_replay_path():
    return FIXTURES / "s1_replay.jsonl"


@pytest.fixture(scope="session")
def s1_replay_lines(s1_replay_path):
    return s1_replay_path.read_text(encoding="utf-8").splitlines()


@pytest.fixture(scope="session")
def timed_replay_path():
    return FIXTURES / "timed_replay.jsonl"


def record_line(t, code, tag="A1B2", sensor="rfidReader", reader="R1"):
    if sensor == "rfidReader":
        payload = {"tag_id": tag, "ir_code": code, "motion": True}
    else:
        payload = {"bt_address": tag}
    return json.dumps({"t": t, "sensor": sensor, "reader_location": reader, "payload": payload})
