"""Monocular thermal SLAM with a rasterized 3-D Gaussian map.

Submodules:
  geometry    poses, projection, Sim(3) alignment
  enhance     thermal raw -> [0, 1] tone mapping
  dataio      dataset manifests, TUM/PFM/PLY/PNG readers and writers
  synthetic   procedural scene + trajectory generator
  oracles     flow / mono-depth prediction contracts and test oracles
  graph       keyframe covisibility graph and frame tracking
  dba         dense bundle adjustment (poses + inverse depths)
  dso         depth-scale optimization against a mono prior
  proxy       fused proxy depth maps
  splat_map   Gaussian map container, spawning, densify/prune
  raster      differentiable tile rasterizer and mapping loss
  metrics     ATE / PSNR / SSIM
  config      run configuration
  pipeline    end-to-end odometry + mapping driver
  cli         command-line entry point
"""

__version__ = "0.1.0"
