"""rangeseg: recurrent semantic segmentation of lidar range images.

Point clouds from a rotating lidar are projected onto 2d range images,
segmented by a convolutional network whose feature memory is carried
from frame to frame, aligned for ego-motion in between, and the
per-pixel labels are transferred back onto the full 3d cloud.
"""

__version__ = "0.1.0"
