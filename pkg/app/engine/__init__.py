# Numerical core: geometry, rendering, noise, denoising pipeline, estimation, metrics
