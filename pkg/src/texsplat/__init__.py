"""Single-image texture transfer onto 3D Gaussian-splat objects, on the CPU.

The package wires together a DDIM-style schedule with exact inversion, a
deterministic splat rasterizer with photometric fine-tuning, a small trainable
latent denoiser with fused reference cross-attention, gradient-guidance
compositions, single-pair prompt-token tuning, and the progressive per-view
edit loop.
"""

from .config import ExperimentConfig, load_config, parse_config
from .denoiser import (Denoiser, DenoiserConfig, PromptTokens, RefEntry,
                       ReferenceSet, TrainConfig, load_weights,
                       prompt_from_names, save_weights, train_denoiser)
from .embedder import embed_image, make_projector, texture_delta
from .errors import (ConfigError, DivergenceError, EmptyMaskError,
                     MissingArtifactError, TexsplatError, ZeroDeltaError)
from .evaluate import EvalReport, eval_consistency, eval_similarity
from .finetune import finetune
from .guidance import (GuidanceTermTrace, GuidanceWeights, ViewConditioning,
                       guided_denoise_view, guided_noise_basic,
                       guided_noise_full)
from .latent import decode_latent, encode_latent, masked_encode
from .nn import weighted_attention
from .pipeline import evaluate_existing, run_experiment
from .prompt_tune import (TokenEmbedding, TuneConfig, clip_loss,
                          clip_loss_grad, diff_loss, load_token, save_token,
                          tune_token)
from .progressive import (EditSettings, ReferenceAcquisition,
                          acquire_reference, build_reference_set, edit_all,
                          edit_view, order_views, refine_depth)
from .render import (ViewRecord, make_view_record, render, render_depth,
                     render_mask)
from .scene import (CameraPose, GaussianScene, camera_ring, load_scene,
                    look_at_pose, save_scene, synth_scene)
from .schedule import (KappaAssignment, NoiseSchedule, assign_kappa,
                       build_schedule, ddim_denoise_step, ddim_invert_step,
                       partial_invert)
from .textures import texture_image, texture_patch, token_vocabulary, training_corpus

__version__ = "0.1.0"
