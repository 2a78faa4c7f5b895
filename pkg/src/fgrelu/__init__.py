"""Feedback-gated ReLU networks."""
