"""Per-node graph prompt tuning on a small numpy autodiff engine."""

from .autodiff import Adam, Tensor, backward
from .backbone import (
    Backbone,
    GcnLayer,
    backbone_forward,
    checkpoint_load,
    checkpoint_save,
    encode_inputs,
    gcn_forward,
    pretrain_edge_prediction,
    readout_mean,
)
from .data import (
    Dataset,
    GraphInstance,
    SplitSpec,
    SyntheticSpec,
    benchmark_spec,
    collate,
    ego_subgraph,
    generate_synthetic,
    kshot_split,
    load_dataset,
    save_dataset,
)
from .experiment import ABLATIONS, BASELINES, cluster_witness, prepare, run_benchmark
from .metrics import roc_auc
from .phm import BottleneckProjector, Dense, PhmLayer, phm_param_count, ratio_vs_fcn
from .prompt import PromptModel, PromptedBatch, apply_prompts, generate_prompts, straight_through_compose
from .trainer import MetricsReport, TrainConfig, Tuner, collapse_diagnostic, loss_total
from .vq import Codebook, distances_and_logits, ema_update, init_codebook, quantize, sample_indices

__version__ = "0.1.0"
