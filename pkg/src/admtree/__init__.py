"""Adaptive hierarchical context compression over a frozen toy backbone."""

from .autodiff import (DegenerateMaskError, Tape, Tensor, backward,
                       cross_entropy, finite_difference_grad, matmul, mha,
                       no_grad, rms_norm, rope, rope_tables, softmax_rows)
from .checkpoint import FormatError
from .compressor import (CompressConfig, CompressionSession, SessionStateError,
                         achieved_ratio, append_turn, compress_document,
                         compress_step, context_attention_scores, generate,
                         load_session, save_session)
from .model import (AttentionLayout, BackboneConfig, LayoutError, NodeContext,
                    ParameterSet, causal_layout, encode_window, lm_logits,
                    project_tree_context)
from .segmenter import (ScoringConfig, SegmentPlan, SubSegment,
                        allocate_budgets, assign_tiers, build_plan,
                        info_score, initial_segments, segment_entropy,
                        segment_ppl, tier_counts)
from .training import (Adam, TrainConfig, backbone_loss, gist_loss,
                       load_corpus, make_needle_corpus,
                       make_repetition_corpus, position_nll, repetition_eval,
                       repetition_generation_accuracy, save_corpus,
                       train_backbone, train_gist)
from .tree import (Aggregator, SemanticTree, TreeNode, aggregate, build_batch,
                   retrieve_top_nodes)

__version__ = "0.1.0"
