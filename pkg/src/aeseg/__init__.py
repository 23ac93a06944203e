"""Adversarial-erasing region mining and prohibitive segmentation learning."""
