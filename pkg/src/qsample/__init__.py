"""qsample: learn diffusion-MRI q-space sampling directions by gradient descent.

Subpackages cover spherical-harmonic regression (:mod:`qsample.sphere`),
electrostatic baseline designs (:mod:`qsample.design`), the differentiable
subsample/reconstruct training pipeline (:mod:`qsample.pipeline`),
synthetic multi-tensor phantoms (:mod:`qsample.phantom`), ODF estimation
and deterministic streamline tracking (:mod:`qsample.tract`), and
signal/tractogram scoring (:mod:`qsample.score`).  The ``qsample`` CLI in
:mod:`qsample.cli` ties them together.
"""

__version__ = "0.1.0"
