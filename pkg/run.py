#!/usr/bin/env python3
"""
Main runner script for semantic smoothing.
Forwards to the typer application, e.g. ``python run.py certify --help``.
"""
from semantic_smoothing.cli import app

if __name__ == "__main__":
    app()
