"""Learned image codec built on residual SwinV2 transformer blocks."""
