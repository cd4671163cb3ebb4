"""Desk-scale evaluations: safety, quality, over-refusal, and the experiment drivers built on them."""

from .metrics import EvalReport, eval_quality, eval_safety, evaluate, over_refusal_rate

__all__ = ["EvalReport", "eval_quality", "eval_safety", "evaluate", "over_refusal_rate"]
