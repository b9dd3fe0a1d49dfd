"""Core domain logic for crossprompt-seg: losses, prompt geometry, metrics, and services."""
