"""Command-line layer for crossprompt-seg."""
