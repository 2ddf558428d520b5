"""lanefuse: deterministic lane-level camera-LiDAR fusion planning sandbox."""

__version__ = "0.1.0"
