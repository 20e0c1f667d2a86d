"""Neural harmonic textures: HDR image fitting on an adaptive Delaunay mesh.

Per-vertex latent features are interpolated with C1 Clough-Tocher patches,
encoded with sin/cos, and decoded by one small MLP per sample. A 2D splat
compositor with transmittance-weighted harmonic blending and a quantized,
entropy-coded model container round out the package.
"""

__version__ = "0.1.0"
