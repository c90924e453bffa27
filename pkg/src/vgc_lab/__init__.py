"""Debiased out-of-sample evaluation of affine plug-in policies."""
