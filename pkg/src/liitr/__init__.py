"""Locally interpretable individualized treatment rules.

A black-box outcome model is probed around each subject with realistic
perturbations drawn through a VAE latent space; a gated mixture of linear
experts is fit to the probes and the subject's expert yields a readable rule.
"""
__version__ = "0.1.0"
