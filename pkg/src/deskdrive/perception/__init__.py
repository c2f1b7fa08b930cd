"""Synthetic scenes, region proposals, conv features, SVM and multi-task detectors, tracking."""

from .detect import (ConvTrunk, ProposalConfig, crop_resize, edge_energy, extract_features,
                     extract_features_batch, iou, iou_matrix, nms, propose_regions, sliding_windows)
from .network import MultiTaskNet, RegionSet, TrainConfig, build_regions, label_regions, train_multitask
from .pipeline import (DetectionReport, MultiTaskDetector, PerceptionConfig, PerceptionModel,
                       TwoStageDetector, evaluate_detector, match_detections, scene_stream, train_perception)
from .scene import (BACKGROUND, CLASS_NAMES, PEDESTRIAN, VEHICLE, DetectionBox, SceneConfig,
                    SceneFormatError, SceneImage, Sequence, generate_scene, generate_sequence,
                    load_scene, save_scene)
from .svm import SvmConfig, SvmModel, hinge_objective, svm_classify, svm_scores, svm_train
from .tracker import (Tracker, TrackerConfig, TrackState, associate, frame_correctness, run_tracker,
                      track_step)
