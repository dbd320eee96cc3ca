"""Spatial expression GCN pipeline: 15-spot subgraphs, masked-central-spot
pretraining, and the imputation / clustering / perturbation evaluation suite."""

__version__ = "0.1.0"
