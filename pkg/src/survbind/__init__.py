"""survbind: multi-modal survival analysis with contrastive modality binding.

Trains a discrete-time hazard model on per-patient sets of modality
embeddings: attention-based multi-instance aggregation within and across
modalities, memory-queue InfoNCE alignment of optional modalities onto the
pathology hub space, and progressive pseudo-label disambiguation of censored
survival labels. Ships a synthetic cohort generator, a survival metrics suite
(concordance, Brier, Kaplan-Meier, logrank), and a CLI.
"""

__version__ = "0.1.0"
