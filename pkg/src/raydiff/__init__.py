"""Desk-scale multi-view diffusion for single-image novel view synthesis."""
