"""Deep ranking toolkit for cross-view person re-identification.

Learns a pairwise similarity function over stitched image pairs with a
rank-based logistic objective, and evaluates it with closed-world CMC and
open-world TTR/FTR protocols.
"""

__version__ = "0.1.0"

from .network import (NetworkConfig, Network, Checkpoint, build_network, desk_small,
                      paper_alexnet_like, PRESETS, score_pair, backward_pair,
                      save_checkpoint, load_checkpoint)
from .pipeline import (PersonImage, StitchedPair, RankingUnit, SamplerPolicy,
                       stitch, augment_variant, random_crop, central_crop,
                       test_time_inputs, build_units, make_minibatches,
                       default_stitch_side)
from .ranking import (UnitScores, UnitGrads, surrogate_sigma, stable_delta_ratio,
                      zero_one_rank, unit_loss, unit_grad, batch_loss)
from .datasets import (DatasetIndex, SplitSpec, SynthParams, ingest, split,
                       synth_generate, load_image, export_dataset)
from .training import TrainConfig, LossLog, train, fine_tune, held_out_loss
from .evaluation import (ScoreMatrix, CmcCurve, OpenWorldPoint, score_matrix,
                         cmc_from_scores, multishot_aggregate, cmc_trials,
                         open_world_sweep, fuse_scores, pixel_nn_scores)
