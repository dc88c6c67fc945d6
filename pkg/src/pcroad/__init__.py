"""Real-time LiDAR road-object detection on organized range images.

Stages: spherical projection, sector-wise RANSAC ground removal, range-image
clustering, canonicalized proposals, PointNet-style classifier and box
networks gated by energy scores.
"""
from .boxes import CLASS_NAMES, Box3D
from .clustering import ClusterConfig, ClusterLabels, cluster_depth
from .config import ConfigError, PipelineConfig, load_config, parse_config, save_config, serialize_config
from .ground import GroundConfig, GroundMask, NoPlane, segment_ground
from .networks import (BoxPrediction, Detection, EnergyConfig, NetworkWeights, box_forward, calibrate_threshold,
                       classifier_forward, decode_box, energy_score, id_passthrough, init_weights)
from .pipeline import Pipeline, ScanResult, Weights, detect_scan
from .projection import OrganizedCloud, ProjectionConfig, project_cloud
from .proposals import Proposal, ProposalConfig, extract_proposals
from .training import TrainConfig, train_network

__version__ = "0.1.0"
