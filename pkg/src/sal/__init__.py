"""Learned receive-array sub-sampling for stepped-frequency MIMO imaging.

The package simulates a dense virtual array, learns which receivers to keep
(or where to place emulated ones) jointly with a small reconstruction
network, and evaluates the resulting range-azimuth maps against full-array
references. See the demos directory for worked examples and the ``sal``
command for the file-based workflow.
"""

from .autodiff import Node, backward, constant, leaf, param
from .beamform import (SteeringMatrix, beamform, build_steering,
                       full_array_map, read_map_raw, steering_phases_node,
                       write_map_pgm, write_map_raw)
from .dataset import (Dataset, DatasetRecord, make_dataset, read_dataset,
                      write_dataset)
from .simulate import (ArrayConfig, BasebandCube, Scene, SceneSampler,
                       signal_matrix, synth_baseband)
from .subsample import (ContinuousDesign, DiscreteDesign, apply_continuous,
                        apply_discrete, beta_of_alpha,
                        gaussian_copula_uniforms, infer_discrete_selection,
                        read_design, relaxed_bernoulli, relaxed_logistic,
                        relaxed_topk, uniform_coords, write_design)
from .taskmodel import (ModelDescriptor, ReconstructionModel, load_checkpoint,
                        save_checkpoint)
from .train import (Adam, EvalReport, TrainConfig, TrainResult,
                    baseline_random_best, evaluate_design, psnr,
                    random_design_values, reconstruct_maps, ssim, train,
                    uniform_design_values, write_history, write_metrics_csv)

__version__ = "0.1.0"

__all__ = [
    "Adam", "ArrayConfig", "BasebandCube", "ContinuousDesign", "Dataset",
    "DatasetRecord", "DiscreteDesign", "EvalReport", "ModelDescriptor",
    "Node", "ReconstructionModel", "Scene", "SceneSampler", "SteeringMatrix",
    "TrainConfig", "TrainResult", "apply_continuous", "apply_discrete",
    "backward", "baseline_random_best", "beamform", "beta_of_alpha",
    "build_steering", "constant", "evaluate_design", "full_array_map",
    "gaussian_copula_uniforms", "infer_discrete_selection", "leaf",
    "load_checkpoint", "make_dataset", "param", "psnr",
    "random_design_values", "read_dataset", "read_design", "read_map_raw",
    "reconstruct_maps", "relaxed_bernoulli", "relaxed_logistic",
    "relaxed_topk", "save_checkpoint", "signal_matrix", "ssim",
    "steering_phases_node", "synth_baseband", "train", "uniform_coords",
    "uniform_design_values", "write_dataset", "write_design", "write_history",
    "write_map_pgm", "write_map_raw", "write_metrics_csv",
]
