# conftest.py - shared pytest setup

import logging

import pytest


@pytest.fixture(autouse=True)
def _quiet_logging():
    logging.getLogger().setLevel(logging.WARNING)
