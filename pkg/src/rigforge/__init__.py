"""rigforge: FACS-conditioned facial mesh deformation and blendshape rigging."""

__version__ = "0.1.0"
