"""Numerical core: sparse aggregation, GNN layers, batching, model and optimizer."""
from .batch import VectorizedBatch, full_graph_batch, prune, vectorize
from .layers import LayerParams, aggregate
from .model import GNNModel, ModelConfig, loss_and_grad, scores
from .optim import AdamState, adam_step
from .sparse import EdgePartition, SparseAdj, partition_edges, spmm

__all__ = ["AdamState", "EdgePartition", "GNNModel", "LayerParams", "ModelConfig", "SparseAdj",
           "VectorizedBatch", "adam_step", "aggregate", "full_graph_batch", "loss_and_grad",
           "partition_edges", "prune", "scores", "spmm", "vectorize"]
