"""Simprov: target-domain adaptation via confident pseudo-labels and self-distillation."""
