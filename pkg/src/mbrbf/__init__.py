"""Multi-branch Gaussian RBF classifier heads over CNN feature maps.

A desk-scale library for building, training, and dissecting a network whose
head splits reduced feature maps into parallel branches of Gaussian RBF
units (or dense+ReLU units for the baseline), concatenates their outputs in
a fixed order, and classifies with a softmax layer.
"""

__version__ = "0.1.0"

from .backbone import (
    Backbone,
    BackboneConfig,
    FeatureBlock,
    backbone_forward,
    backbone_init,
    load_backbone,
    load_feature_block,
    save_backbone,
)
from .data import (
    DataBundle,
    DatasetManifest,
    Record,
    SynthConfig,
    batch_iter,
    gen_bimodal_synth,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .errors import (
    ConfigError,
    DivergenceError,
    EmptySplitError,
    FormatError,
    MBRBFError,
    ShapeError,
    ValidationError,
)
from .layers import (
    DenseReLU,
    RBFBranch,
    ReduceConv,
    SoftmaxClassifier,
    dense_relu_backward,
    dense_relu_forward,
    grad_check,
    rbf_backward,
    rbf_forward,
    reduce_conv_backward,
    reduce_conv_forward,
    softmax_cross_entropy,
)
from .model import (
    MBModel,
    ModelConfig,
    load_checkpoint,
    model_backward,
    model_build,
    model_forward,
    model_forward_batch,
    predict,
    save_checkpoint,
)
from .optim import AdamHyper, AdamState, adam_step, init_adam, sgd_step
from .pgm import export_centers, write_pgm
from .report import write_report
from .tensorio import as_tensor, flatten, read_tensor, unflatten, write_tensor
from .train import (
    ConfusionMatrix,
    RunHistory,
    TrainConfig,
    ablation_grid,
    aggregate_grid,
    compare_heads,
    evaluate,
    pretrain_backbone,
    train,
)
