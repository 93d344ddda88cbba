"""Sparse autoencoder lab: dense TopK, Switch and scaled multi-expert SAEs."""

from ._core import (
    Model,
    ParseError,
    SaelabError,
    TrainConfig,
    __version__,
    activation_similarity,
    aux_loss,
    dictionary_recovery,
    evaluate,
    fnv1a64,
    gen_synthetic,
    init_model,
    intra_inter_similarity,
    load_config,
    load_model,
    loss_recovered,
    overlap_histogram,
    parse_config,
    preset_config,
    preset_names,
    read_activations,
    recon_loss,
    redundancy_fraction,
    run_cli,
    train,
    write_activations,
)

__all__ = [
    "Model",
    "ParseError",
    "SaelabError",
    "TrainConfig",
    "activation_similarity",
    "aux_loss",
    "dictionary_recovery",
    "evaluate",
    "fnv1a64",
    "gen_synthetic",
    "init_model",
    "intra_inter_similarity",
    "load_config",
    "load_model",
    "loss_recovered",
    "overlap_histogram",
    "parse_config",
    "preset_config",
    "preset_names",
    "read_activations",
    "recon_loss",
    "redundancy_fraction",
    "run_cli",
    "train",
    "write_activations",
]
