"""Desk-scale multi-task pretraining lab.

Subpackages and modules:

* ``tensorcore``          -- tensors, RNG, autodiff, gradient checking
* ``rvsa_attention``      -- rotated varied-size window attention backbone
* ``annotation_pipeline`` -- rotated-box label geometry and synthetic data
* ``mtp_engine``          -- task heads, losses, optimizer, training loop
* ``analytics``           -- finetuning-schedule influence-factor table
* ``cli``                 -- command-line entry point
"""

__version__ = "0.1.0"

TENSOR_FORMAT = "TNSR1"
DATASET_FORMAT = "MTSD1"
