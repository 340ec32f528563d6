import json

import pytest

from reviewbench.corpus import ItemMeta, Review

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_review(user="U1", item="I1", rating=5.0, title="", text="some review text", timestamp=1,
                domain="Video_Games"):
    return Review(user, item, rating, title, text, timestamp, domain)


@pytest.fixture
def write_lines(tmp_path):
    def _write(name, rows):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(row if isinstance(row, str) else json.dumps(row))
                fh.write("\n")
        return path

    return _write


@pytest.fixture(scope="session")
def small_world():
    from reviewbench.synthetic import make_world

    return make_world(n_items=40, seed=7)


@pytest.fixture
def meta_item():
    return ItemMeta("B000BUG", "Patio_Lawn_and_Garden", "BUG-A-SALT 3.0 Black Fly Edition",
                    ("Kills flies with table salt",), ("A salt-firing insect gun.",))
