"""Joint speech-text masked spectrogram pretraining.

A Conformer reconstructs masked log-mel frames and masked phonemes from a
concatenated speech + phoneme sequence. The same model performs
prompt-based cross-lingual voice cloning and mask-and-infill speech
editing without finetuning.
"""

from .features import (
    AudioClip,
    FeatureConfig,
    FeatureStats,
    LogMelSpectrogram,
    compute_log_mel,
    denormalize_features,
    invert_mel_preview,
    load_audio,
    normalize_features,
)
from .inference import (
    CloneRequest,
    DurationModel,
    EditRequest,
    clone_voice,
    durations_to_frames,
    edit_speech,
    predict_durations,
    reconstruct_masked,
    train_duration_model,
)
from .linguistic import (
    Alignment,
    PhonemeSeq,
    PhonemeVocab,
    encode_phonemes,
    merge_vocabs,
    parse_alignment_file,
    uniform_alignment,
)
from .masking import MaskedPair, MaskPlan, apply_masks, plan_masks
from .model import MaskedSpeechTextModel, ModelConfig, speech_loss, text_loss, total_loss
from .pipeline import (
    BilingualScheduler,
    Checkpoint,
    TrainConfig,
    load_manifest,
    make_batches,
    noam_lr,
    run_pretraining,
)
from .tools import SimilarityMatrix, export_plot_data, phoneme_similarity

__version__ = "0.1.0"
