"""Tests for crossprompt-seg."""
