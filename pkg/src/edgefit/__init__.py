"""edgefit: training, int8 quantization, and performance accounting for a
tiny residual 1D CNN that classifies gym workouts from 7-channel
wrist-sensor windows."""

__version__ = "0.1.0"
