"""Unit tests for crossprompt-seg core logic and adapters."""
