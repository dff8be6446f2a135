# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

import logging

import numpy as np
from paranoid.settings import Settings as _ParanoidSettings

# Conditions in @ensures and @requires are evaluated in paranoid's
# namespace, and ours use numpy.
_ParanoidSettings.get('namespace').update({"np" : np})

logging.getLogger(__name__).addHandler(logging.NullHandler())

from .settings import Settings
from .exceptions import *
from .kernels import ConvSpec
from .autodiff import Tape, Variable, Parameters, backward
from .attention import L2SabConfig, l2_sab_attention, l2_sab_forward, cbam_spatial_attention
from .model import (LayerGraph, build_model, build_baseline, build_l2sa,
                    build_baseline_cbam, build_vgg16_star, count_parameters,
                    init_parameters, forward, predict)
from .checkpoint import save_checkpoint, load_checkpoint
from .data import Dataset, load_directory, split, synth_dataset
from .train import TrainConfig, train, evaluate, adam_step
from .gradcheck import grad_check, certify
from .benchmark import benchmark_inference
from ._version import __version__
