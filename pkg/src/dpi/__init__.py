"""Two-stage masked diffusion sampling for grid-conditioned image restoration.

Public surface, by area:

- schedule: noise schedules and forward/reverse diffusion primitives
- masks: fixed grid masks, condition projection, edge-adaptive mask draws
- sampler: the two-stage masked samplers (ancestral and implicit)
- corrector: the trainable condition corrector and its losses
- denoisers: the Gaussian oracle and the tiny trainable denoiser
- degradation: the blind blur/downsample/noise/JPEG/upsample synthesizer
- metrics: PSNR, SSIM, grid-restricted MSE
- cli: the ``dpi`` command-line entry point
"""

from .schedule import (NoiseSchedule, DenoiserOutput, build_linear_schedule,
                       default_schedule, forward_sample, predict_x0,
                       posterior_mean, posterior_variance, reverse_step)
from .masks import (FixedMask, AdaptiveMask, Condition, ProbabilityMap,
                    make_fixed_mask, project_initial_condition, backtrack,
                    edge_probability_map, mask_gen)
from .sampler import (DpiConfig, SampleTrace, dpi_sample, dpi_sample_ddim,
                      fcm_combine, racm_combine, noisy_condition,
                      conditional_posterior, ddim_sigma, ddim_timesteps)
from .corrector import (CrtModel, CrtTrainConfig, CrtTrainSample, IdentityCorrector,
                        FrozenCorrector, ConditionSynthesis, crt_forward, loss_prior,
                        loss_gap, loss_crt, crt_gradients, train_crt, omega_schedule)
from .denoisers import (GaussianOracleDenoiser, TinyDenoiser, DenoiserTrainConfig,
                        oracle_eps, train_tiny_denoiser, sample_unconditional)
from .degradation import (DegradationConfig, gaussian_blur, downsample,
                          upsample_bicubic, resize_bicubic, add_noise,
                          jpeg_compress, degrade, sample_severe_config)
from .metrics import MetricReport, psnr, ssim, grid_mse
from .rng import RandomStream, stream

__version__ = "0.1.0"
