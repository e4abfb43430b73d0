"""Temporal stabilization of per-frame video disparity.

A per-frame predictor's flickering disparity maps are refined by a small
RGB-D network that attends from each target frame to a sliding window of
neighbours; forward and backward windows can be averaged and fused with
motion-aware weights. The package also ships a synthetic benchmark with
exact flow and disparity, the evaluation metrics and a segmentation variant.
"""
from .core import (AlignmentError, DisparityMap, FlowField, Frame, SlidingWindow, VideoSequence,
                   align_scale_shift, discretize_disparity, normalize_window, window_indices)
from .flowops import compose_flows, flow_consistency_mask, relevance_map, visibility_mask, warp_backward
from .inference import (InferenceMode, bidirectional_average, backward_pass, flow_guided_fusion,
                        forward_pass, stabilize_video)
from .losses import (LossWeights, affinity_invariant_loss, gradient_matching_loss, temporal_loss,
                     window_loss)
from .metrics import MetricsReport, depth_metrics, evaluate, opw, temporal_consistency_tc
from .stabilizer import (FlickerDepthPredictor, FlickerParams, StabilizerConfig, StabilizerModel,
                         load_checkpoint, save_checkpoint, stabilize_window)

__version__ = "0.1.0"
