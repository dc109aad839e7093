from .features import (Categorical, Dense, FeatureMatrix, FeatureSchema, ItemList, ItemRef,
                       featurize, stable_hash)
from .model import (ModelSnapshot, RankModel, SortedScores, TrainConfig, auc_score,
                    evaluate_auc, event_gradient, event_objective, fit, predict, predict_log,
                    predict_logits, sigmoid, snapshot_embeddings, train)

__all__ = ["Categorical", "Dense", "FeatureMatrix", "FeatureSchema", "ItemList", "ItemRef",
           "featurize", "stable_hash", "ModelSnapshot", "RankModel", "SortedScores",
           "TrainConfig", "auc_score", "evaluate_auc", "event_gradient", "event_objective",
           "fit", "predict", "predict_log", "predict_logits", "sigmoid", "snapshot_embeddings",
           "train"]
