"""Two-stage fine-tuning that learns per-parameter noise by minimizing a
PAC-Bayes bound, then continues with perturbed gradient descent using the
learned noise. Built on a minimal float64 tape-autodiff engine sized for
small MLP classifiers and a seeded transfer-task benchmark harness.
"""

from .autodiff import (AutodiffError, NumericsError, ShapeError, Tape, Tensor,
                       finite_diff_check, forward_op, gradcheck_op)
from .bound import (AutoGamma, BoundConfig, BoundTerms, FixedGamma, FixedK,
                    KTracker, NoiseState, RunningK, estimate_k, generic_bound,
                    init_noise_state, kl_diag_vs_isotropic, l_pac,
                    load_noise_state, objective_gradcheck, optimal_gamma,
                    pac_objective, perturb_params, save_noise_state)
from .datasets import (Dataset, DatasetSpec, TransferPair, builtin_task,
                       export_csv, few_shot_sample, generate, load_csv)
from .kernels import BACKEND
from .models import (GroupPacker, MLPClassifier, ParamGroup, init_weights,
                     load_checkpoint, replace_head, save_checkpoint)
from .optim import AdamState, Constant, StepDecay, adam_step, schedule_value
from .pgd import (IsotropicNoise, LearnedNoise, PGDConfig, pgd_step,
                  random_layer_noise_step)
from .pipeline import (DivergenceError, RunRecord, Stage1Config, Stage2Config,
                       evaluate, importance_ranking, metrics,
                       noise_injection_finetune, pretrain_model, run_finetune,
                       stage1_train, stage2_train, vanilla_finetune)

__version__ = "0.1.0"
