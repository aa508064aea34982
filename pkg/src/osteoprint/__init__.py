"""Shape retrieval for long-bone-like objects from 2D radiograph projections.

Pipeline modules:

- :mod:`osteoprint.phantom` — seeded synthetic voxel phantoms
- :mod:`osteoprint.drr` — parametric X-ray projection rendering and dataset files
- :mod:`osteoprint.encoder` — convolutional embedding network (numpy, explicit backprop)
- :mod:`osteoprint.triplet` — triplet sampling, loss, accuracy and training loop
- :mod:`osteoprint.fingerprint` — embedding store, kNN, pairwise verification, shape retrieval
- :mod:`osteoprint.mesh` — iso-surfaces, rigid alignment, RMS/Hausdorff distances
- :mod:`osteoprint.cli` — experiment orchestration and command line
"""

__version__ = "0.1.0"
