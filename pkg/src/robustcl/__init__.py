"""Robustness-preserving class-incremental learning with bilevel coreset selection."""

from .autodiff import Tape, Tensor, TensorError, TapeClosedError, finite_diff_grad
from .attacks import AttackConfig, at_loss, pgd_attack, robust_accuracy
from .continual import (
    CilConfig,
    MemoryBank,
    MetricsMatrix,
    RunResult,
    disparity,
    eval_attack_config,
    lwf_loss,
    run_cil,
    train_task,
    update_memory_bank,
)
from .coreset import (
    BloResult,
    IhvpResult,
    SelectionConfig,
    hypergradient,
    ihvp_cg,
    inner_solve_unrolled,
    project_capped_simplex,
    select_coreset_blo,
    select_influence,
    select_random,
    st_threshold,
)
from .datasets import (
    Dataset,
    TaskDataset,
    gen_blobs,
    load_cifar10_binary,
    load_dataset,
    plant_label_noise,
    save_dataset,
    split_tasks,
    validate_stream,
)
from .models import (
    ModelParams,
    ModelSpec,
    accuracy,
    cross_entropy,
    forward_logits,
    forward_logits_flat,
    grow_head,
    init_model,
    load_model,
    per_example_cross_entropy,
    save_model,
)

__version__ = "0.1.0"
