"""gstw: desk-scale digital-twin workbench for geological CO2 storage.

The package covers the full loop of a storage digital twin:

* stochastic aquifer geomodels (conditioned multi-Gaussian fields),
* a coupled two-phase flow / linear poroelasticity simulator with a
  fixed-stress sequential scheme,
* a recurrent R-U-Net surrogate (encoder -> convLSTM -> decoder) trained
  on simulated ensembles,
* PCA parameterization of the prior and rejection-sampling data
  assimilation from surface vertical-displacement observations.
"""

__version__ = "0.1.0"
