"""Knee osteoarthritis severity models: elastic net, random forest, random-intercept
LMM, mixed-type correlations, and a numpy reference CNN, with a seeded synthetic
cohort harness."""

__version__ = "0.1.0"
