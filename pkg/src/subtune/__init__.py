"""Selective-layer finetuning (SubTuning) on a small residual network stack."""

__version__ = "0.1.0"
