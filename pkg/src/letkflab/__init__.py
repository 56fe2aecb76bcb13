"""Local ensemble transform Kalman filter and twin-experiment harness."""

__version__ = "0.1.0"
