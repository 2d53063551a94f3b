"""Python bindings for the metaseg C++ core."""

from ._metaseg import (
    ConfigError,
    DomainSpec,
    ParameterSet,
    ShapeError,
    TaskSpec,
    TrainingDiverged,
    __version__,
    agg_loss,
    config_hash,
    confusion_matrix,
    evaluate_domain,
    generate_sample,
    infer,
    init_models,
    iou_report,
    load_checkpoint,
    make_domain_family,
    meta_objective,
    plot,
    resolve_config,
    run,
    save_checkpoint,
    seg_loss,
    train,
)
