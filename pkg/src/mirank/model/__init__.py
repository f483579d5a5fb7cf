from mirank.model.network import (
    CLASS_NAMES, SE_LAYERS, ArchConfig, ModelState, backward, build_model, eegnet_config, forward,
    logits, predict, predict_from_logits,
)
from mirank.model.se import (
    ElectrodeSE, FeatureMapSE, electrode_se_forward, electrode_se_forward_per_map, featuremap_se_forward,
)
