"""Stain masks, mask and image metrics, gland segmentation and reports."""
