"""crossprompt-seg: semi-supervised promptable segmentation.

Dual-decoder promptable segmenter trained with cross prompting, prompt
consistency regularization, and LoRA fine-tuning of the image encoder.
Ships a toy reference model and a synthetic dataset generator so the whole
pipeline runs end-to-end on a CPU.
"""

__version__ = "0.1.0"
