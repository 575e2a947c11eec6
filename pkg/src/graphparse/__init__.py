"""Graph-based hierarchical human parsing on a small numpy autodiff core.

Modules: ``numcore`` (tensors, autodiff, SGD, gradient checking),
``taxonomy`` (label sets, adjacency and transfer matrices), ``graphnn``
(graph head), ``segnet`` (backbone, classifiers, upsampling), ``model``,
``synthdata`` (procedural scenes and codecs), ``trainer``, ``metrics``,
``experiments`` and ``cli``.
"""
from .errors import (ConfigError, DataError, DimensionError, GraphparseError, NumericError,
                     ParseError, TaxonomyError, UsageError)
from .model import ModelConfig, SegmentationModel
from .numcore import Parameter, Tensor
from .segnet import BackboneConfig
from .synthdata import Sample, SceneConfig, generate_scene
from .taxonomy import LabelTaxonomy, load_taxonomy
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
