"""Adaptive-mask dual-camera CASSI toolkit.

A differentiable simulator for coded-aperture snapshot spectral imaging
with a parallel RGB arm, a learned (template-seeded) coded mask, a
multi-stage MLP reconstruction network with shared stage weights, and a
training/evaluation/benchmark harness — all on a self-contained float64
reverse-mode autodiff core.
"""

from .errors import AmdcError, ContractError, FormatError, ShapeError
from .optics import (DispersionSpec, HsiCube, MeasurementPair, NoiseSpec,
                     SensingOperator, SpectralResponse, cassi_adjoint,
                     cassi_forward, cassi_forward_t, disperse,
                     integrate_measure, mask_modulate, reproject, rgb_project,
                     sensing_matrix_dense, shift_back_init, simulate_pair)
from .masks import (MaskTemplate, freeze_mask, load_mask, mask_io,
                    mask_net_forward, save_mask, template_init, threshold_mask)
from .network import (ModelConfig, flop_count, init_model_weights,
                      model_forward, param_count, reconstruct, stage_forward)
from .metrics import evaluate_pair, mrae, psnr, rmse, ssim
from .data import (DatasetManifest, SynthSpec, cube_io, default_response,
                   default_wavelengths, generate_scene, load_cube, load_split,
                   save_cube, split, synth_scenes)
from .training import (AdamState, Checkpoint, TrainConfig, TrainResult,
                       adam_step, checkpoint_io, desk_config, fit_steps,
                       load_checkpoint, loss, lr_at, save_checkpoint, train)
from .bench import emit_report, fps_bench, run_mask_ablation, stage_scaling_bench
from .tensor import GradMap, Tape, Tensor, backward, grad_check

__version__ = "0.1.0"
