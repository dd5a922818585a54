"""Uneven-terrain navigation: plane-fitting RRT*, GPR densification, NMPC tracking."""
