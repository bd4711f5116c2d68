__version__ = '0.1.0'

from .graph import (
    PredictionBatch, AttributedGraph, softmax_with_temperature,
    build_knn_adjacency, build_ablation_adjacency, normalize_adjacency,
    build_attributed_graph)
from .encoder import (
    HolisticEmbedding, tagcn_forward, pooling_forward, project_features,
    HolisticEncoder)
from .contrastive import (
    MemoryBank, infonce_in_batch, infonce_with_bank, graph_bank_variant,
    bank_update)
from .config import DistillConfig, ExperimentManifest
from .distill import (
    vanilla_kd_loss, total_loss, train_step, train, pretrain_teacher,
    relational_reduction_loss)
from .models import build_backbone
from .data import DatasetSpec, load_dataset, make_transfer_split
from .stats import accuracy, ari
from .probe import linear_probe

__all__ = [
    'PredictionBatch', 'AttributedGraph', 'softmax_with_temperature',
    'build_knn_adjacency', 'build_ablation_adjacency', 'normalize_adjacency',
    'build_attributed_graph',
    'HolisticEmbedding', 'tagcn_forward', 'pooling_forward',
    'project_features', 'HolisticEncoder',
    'MemoryBank', 'infonce_in_batch', 'infonce_with_bank',
    'graph_bank_variant', 'bank_update',
    'DistillConfig', 'ExperimentManifest',
    'vanilla_kd_loss', 'total_loss', 'train_step', 'train',
    'pretrain_teacher', 'relational_reduction_loss',
    'build_backbone', 'DatasetSpec', 'load_dataset', 'make_transfer_split',
    'accuracy', 'ari', 'linear_probe'
]
