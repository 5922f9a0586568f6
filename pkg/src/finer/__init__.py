"""Explanation-guided fine-tuning and IC-level explanation ensembles for risk detectors."""

__version__ = "0.1.0"
