"""Attention-based fashion recommender: sequence model, baselines and offline evaluation."""
