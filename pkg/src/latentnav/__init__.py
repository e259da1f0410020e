"""Latent-grid visual navigation: embed RGBD into a renderable top-down map,
track camera pose photometrically, localize image goals by map correlation,
and navigate to them in a procedural simulator."""

__version__ = "0.1.0"
