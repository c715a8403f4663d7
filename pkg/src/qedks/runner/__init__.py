"""Scenario runner: configuration, tasks, persistence and the command line."""

from .config import Scenario, SchemaError, load_scenario, parse_scenario  # noqa: F401
