"""Joint fire classification and segmentation toolkit."""

try:  # installed layout: native module lives inside the package
    from ._attnseg import (
        Model,
        apply_naive_rule,
        bce,
        binarize,
        consistency,
        default_model_config,
        evaluate_corpus,
        gated_attention,
        generate_dataset,
        iou_pair,
        joint_loss,
        train_model,
    )
except ImportError:  # build-tree layout: module sits on PYTHONPATH
    from _attnseg import (
        Model,
        apply_naive_rule,
        bce,
        binarize,
        consistency,
        default_model_config,
        evaluate_corpus,
        gated_attention,
        generate_dataset,
        iou_pair,
        joint_loss,
        train_model,
    )

__all__ = [
    "Model",
    "apply_naive_rule",
    "bce",
    "binarize",
    "consistency",
    "default_model_config",
    "evaluate_corpus",
    "gated_attention",
    "generate_dataset",
    "iou_pair",
    "joint_loss",
    "train_model",
]
