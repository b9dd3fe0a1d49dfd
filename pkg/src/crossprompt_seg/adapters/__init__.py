"""Adapters layer for crossprompt-seg: toy model, LoRA, data, checkpoint, and report I/O."""
