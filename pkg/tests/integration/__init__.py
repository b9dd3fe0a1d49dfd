"""End-to-end CLI tests and slow acceptance harnesses."""
