"""Explainable image similarity: a Siamese network with factual and
counterfactual Grad-CAM maps, plus heatmap-guided dataset cropping."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .data import (ImageRecord, PairSample, PreparedImage, build_pairs, generate_synthetic_dataset,
                   index_dataset, preprocess, stratified_split)
from .model import SiameseNetwork, build_model, decide, embed, forward_pair, load_model, save_model, similarity
from .train import TrainHistory, contrastive_loss, train
from .gradcam import ExplanationBundle, Heatmap, explain_pair, gradcam_map, neuron_weights, overlay
from .crop import BoundingBox, bbox_from_heatmap, build_cropped_dataset, compare_original_vs_cropped
from .metrics import EvaluationReport, evaluate
