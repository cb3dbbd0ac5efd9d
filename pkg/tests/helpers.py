import numpy as np
from sassrec.config import RunConfig, with_overrides

TINY = {
    "data.n_users": 60,
    "data.n_items": 40,
    "data.n_categories": 5,
    "data.n_user_groups": 4,
    "data.exposures_per_user": 20,
    "features.id_dim": 3,
    "features.profile_dim": 2,
    "features.scenario_dim": 3,
    "features.cross_dim": 2,
    "features.sequence_dim": 3,
    "model.hidden": 4,
    "model.depth": 2,
    "model.aux_hidden": [3],
    "model.key_dim": 3,
    "pretrain.batch_size": 16,
    "finetune.batch_size": 32,
    "optimizer.learning_rate": 0.05,
}


def tiny_config(**overrides) -> RunConfig:
    extra = {k.replace("__", "."): v for k, v in overrides.items()}
    return with_overrides(RunConfig(), {**TINY, **extra})


def model_grads(model):
    """Dense gradient for every parameter, in ``named_parameters`` order."""
    out = []
    for _, mod, key in model.named_parameters():
        if hasattr(mod, "dense_grad"):
            out.append(mod.dense_grad(key))
        else:
            out.append(mod.grads.get(key, np.zeros_like(mod.params[key])))
    return out


# (criterion number, title, passed, detail), filled by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []
