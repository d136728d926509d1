"""Weakly supervised segmentation: enhanced CAMs, entropy point prompts and IDS-gated self-training."""
